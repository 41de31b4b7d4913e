"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, tsum


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def gradient_check(
    block: Callable[..., Tensor],
    inputs: dict[str, np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `block(**tensors)` must return a Tensor; it is reduced to a scalar with
    fixed random weights so no gradient entry is structurally zero. Every
    entry of every input is perturbed.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    out = block(**tensors)
    w = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar(ts) -> Tensor:
        return tsum(block(**ts) * w)

    backward(scalar(tensors))
    worst = 0.0
    for name, base in arrays.items():
        analytic = tensors[name].grad if tensors[name].grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for delta in (eps, -eps):
                flat[i] = orig + delta
                probe = {k: Tensor(v) for k, v in arrays.items()}
                vals.append(scalar(probe).item())
            flat[i] = orig
            numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, float(relative_error(analytic, numeric).max(initial=0.0)))
    return worst
