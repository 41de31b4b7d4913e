"""Named parameters, AdamW, and the binary checkpoint format."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"MPMN"
FORMAT_VERSION = 1
_OPT_M = "__adamw_m__/"
_OPT_V = "__adamw_v__/"
_OPT_STEP = "__adamw_step__"


class CheckpointError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class ParameterStore:
    """All trainable weights plus AdamW moments.

    Indexing records the accessed name while `recording()` is active, which
    is how parameter sharing between objectives is audited.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self._touched: set[str] | None = None

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        if self._touched is not None:
            self._touched.add(name)
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def n_values(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def start_recording(self) -> None:
        self._touched = set()

    def stop_recording(self) -> set[str]:
        out, self._touched = self._touched or set(), None
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}

    def state_arrays(self, with_optimizer: bool = True) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        if with_optimizer:
            for n in self.params:
                out[_OPT_M + n] = self.m.get(n, np.zeros_like(self.params[n].data))
                out[_OPT_V + n] = self.v.get(n, np.zeros_like(self.params[n].data))
            out[_OPT_STEP] = np.array(float(self.step_count))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        names = [n for n in arrays if not n.startswith(("__adamw_",))]
        if strict and set(names) != set(self.params):
            missing = sorted(set(self.params) - set(names))
            extra = sorted(set(names) - set(self.params))
            raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for n in names:
            if n in self.params:
                if arrays[n].shape != self.params[n].shape:
                    raise CheckpointError(f"shape mismatch for {n}: {arrays[n].shape} vs {self.params[n].shape}")
                self.params[n].data = np.array(arrays[n], dtype=np.float64)
        if _OPT_STEP in arrays:
            self.step_count = int(arrays[_OPT_STEP])
            self.m = {n: np.array(arrays[_OPT_M + n]) for n in self.params if _OPT_M + n in arrays}
            self.v = {n: np.array(arrays[_OPT_V + n]) for n in self.params if _OPT_V + n in arrays}

    def save(self, path, with_optimizer: bool = True) -> None:
        save_checkpoint(path, self.state_arrays(with_optimizer))

    def load(self, path, strict: bool = True) -> None:
        self.load_arrays(load_checkpoint(path), strict)


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adamw_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> ParameterStore:
    """One AdamW update with bias correction and decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r} at step {store.step_count}")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = beta1 * store.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * store.v.get(name, 0.0) + (1.0 - beta2) * g * g
        store.m[name] = np.asarray(m, dtype=np.float64)
        store.v[name] = np.asarray(v, dtype=np.float64)
        p.data = p.data - lr * weight_decay * p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """MPMN v1: magic, u32 version, then per tensor u64 name length, UTF-8
    name, u64 rank, u64 dims, little-endian f64 payload; trailing CRC32."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<Q", len(raw)) + raw
        buf += struct.pack("<Q", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MPMN checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({exc})") from exc
    return out
