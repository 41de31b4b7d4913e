"""Transformer building blocks and losses on top of the autodiff Tensor."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .params import ParameterStore
from .tensor import ShapeError, Tensor


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    y = T.matmul(x, W)
    return y + b if b is not None else y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return T.layer_norm(x, gamma, beta, eps)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    return T.softmax(x, axis, mask)


def feed_forward(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    return linear(T.gelu(linear(x, W1, b1)), W2, b2)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return T.transpose(T.reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor, n_heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention over n_heads slices of the model width.

    queries (B, Lq, d); keys/values (B, Lk, d); mask is a boolean keep-mask
    broadcastable to (B, Lq, Lk).
    """
    if queries.ndim != 3 or keys.shape != values.shape or queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"attention shapes q={queries.shape} k={keys.shape} v={values.shape}")
    b, lq, d = queries.shape
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    q = _split_heads(queries, n_heads)
    k = _split_heads(keys, n_heads)
    v = _split_heads(values, n_heads)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(d // n_heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask[:, None] if mask.ndim == 3 else mask
    attn = T.softmax(scores, -1, mask)
    out = T.matmul(attn, v)
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, lq, d))


def cross_entropy(logits: Tensor, target, class_mask=None, row_weights=None) -> Tensor:
    """Mean negative log-likelihood of integer targets.

    logits (N, C) or (C,); class_mask marks valid classes (others get -inf);
    row_weights, when given, replaces the plain mean by a weighted mean.
    """
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
        class_mask = None if class_mask is None else np.asarray(class_mask)[None]
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if logits.shape[-1] == 0:
        raise ShapeError("cross_entropy over zero classes")
    logp = T.log_softmax(logits, -1, class_mask)
    n = logits.shape[0]
    picked = T.getitem(logp, (np.arange(n), target))
    if row_weights is None:
        return -T.mean(picked)
    w = np.asarray(row_weights, dtype=np.float64)
    return -T.tsum(picked * (w / w.sum()))


def binary_cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    return T.bce_with_logits(logits, labels)


# parameter initialisation


def init_linear(
    store: ParameterStore, name: str, d_in: int, d_out: int, rng: np.random.Generator, bias=True, fan_in: int | None = None
):
    """Normal weights with std 1/sqrt(fan_in); fan_in defaults to d_in."""
    store.add(f"{name}.W", rng.normal(0.0, 1.0 / math.sqrt(fan_in or d_in), size=(d_in, d_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(d_out))


def init_layer_norm(store: ParameterStore, name: str, d: int):
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def init_attention(store: ParameterStore, name: str, d: int, rng):
    for part in ("q", "k", "v", "o"):
        init_linear(store, f"{name}.{part}", d, d, rng)
    init_layer_norm(store, f"{name}.ln", d)


def init_ffn(store: ParameterStore, name: str, d: int, hidden: int, rng):
    init_linear(store, f"{name}.fc1", d, hidden, rng)
    init_linear(store, f"{name}.fc2", hidden, d, rng)
    init_layer_norm(store, f"{name}.ln", d)


def init_encoder_layer(store, name, d, hidden, rng):
    init_attention(store, f"{name}.attn", d, rng)
    init_ffn(store, f"{name}.ffn", d, hidden, rng)


def apply_linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    b = f"{name}.b"
    return linear(x, store[f"{name}.W"], store[b] if b in store else None)


def apply_layer_norm(store, name, x):
    return layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def attention_block(store, name, x, ctx, mask, n_heads, drop=0.0, rng=None):
    """Post-LN residual attention: LN(x + O(MHA(Qx, K ctx, V ctx)))."""
    a = multi_head_attention(
        apply_linear(store, f"{name}.q", x),
        apply_linear(store, f"{name}.k", ctx),
        apply_linear(store, f"{name}.v", ctx),
        n_heads,
        mask,
    )
    a = T.dropout(apply_linear(store, f"{name}.o", a), drop, rng)
    return apply_layer_norm(store, f"{name}.ln", x + a)


def ffn_block(store, name, x, drop=0.0, rng=None):
    h = feed_forward(x, store[f"{name}.fc1.W"], store[f"{name}.fc1.b"], store[f"{name}.fc2.W"], store[f"{name}.fc2.b"])
    return apply_layer_norm(store, f"{name}.ln", x + T.dropout(h, drop, rng))


def encoder_layer(store, name, x, mask, n_heads, drop=0.0, rng=None):
    x = attention_block(store, f"{name}.attn", x, x, mask, n_heads, drop, rng)
    return ffn_block(store, f"{name}.ffn", x, drop, rng)
