"""FP32 reference math and the non-linear operators used by the decoder.

Everything here works on ``numpy.float32`` arrays.  The matmul has a fixed
summation order so it can serve as a bit-exact oracle for other kernels.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

F32 = np.float32


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta_base: float = 1_000_000.0
    max_position: int = 2048

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ShapeError(f"rope head_dim must be even and positive, got {self.head_dim}")
        if not self.theta_base > 0:
            raise ValueError(f"rope theta_base must be positive, got {self.theta_base}")
        if self.max_position <= 0:
            raise ValueError(f"rope max_position must be positive, got {self.max_position}")

    def inv_freq(self) -> np.ndarray:
        half = self.head_dim // 2
        exps = 2.0 * np.arange(half, dtype=np.float64) / self.head_dim
        return 1.0 / (float(self.theta_base) ** exps)


def _rows_matmul(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    # c += a[:, t] * b[t, :] for ascending t; every step is a rounded f32
    # multiply followed by a rounded f32 add, so each element sees the
    # sequential order sum_t a[i,t]*b[t,j].
    for t in range(a.shape[1]):
        out += a[:, t : t + 1] * b[t : t + 1, :]


def matmul_f32(a: np.ndarray, b: np.ndarray, workers: int = 1) -> np.ndarray:
    """Matrix product with FP32 accumulation in ascending-``t`` order.

    ``workers`` splits rows of ``a`` across threads; the result does not
    depend on it.
    """
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    m = a.shape[0]
    out = np.zeros((m, b.shape[1]), dtype=F32)
    workers = max(1, min(int(workers), m))
    if workers == 1:
        _rows_matmul(a, b, out)
        return out
    bounds = np.linspace(0, m, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_rows_matmul, a[lo:hi], b, out[lo:hi])
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]
        for f in futures:
            f.result()
    return out


def rmsnorm(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """``gamma * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    x = np.asarray(x, dtype=F32)
    gamma = np.asarray(gamma, dtype=F32)
    if x.shape[-1] != gamma.shape[-1]:
        raise ShapeError(f"rmsnorm length mismatch: x {x.shape}, gamma {gamma.shape}")
    if not eps > 0:
        raise ValueError("rmsnorm eps must be positive")
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=F32)
    inv = F32(1.0) / np.sqrt(ms + F32(eps))
    return (x * inv) * gamma


def rope_apply(x: np.ndarray, position: int, params: RopeParams) -> np.ndarray:
    """Rotate lane pairs ``(i, i + head_dim/2)`` by ``position * inv_freq[i]``.

    ``x`` may carry leading head axes; the last axis must be ``head_dim``.
    """
    x = np.asarray(x, dtype=F32)
    if x.shape[-1] != params.head_dim:
        raise ShapeError(f"rope expects last dim {params.head_dim}, got {x.shape[-1]}")
    if position < 0:
        raise ValueError("rope position must be nonnegative")
    half = params.head_dim // 2
    angle = float(position) * params.inv_freq()
    cos = np.cos(angle).astype(F32)
    sin = np.sin(angle).astype(F32)
    lo, hi = x[..., :half], x[..., half:]
    return np.concatenate([lo * cos - hi * sin, lo * sin + hi * cos], axis=-1)


def sigmoid(x):
    x = np.asarray(x, dtype=F32)
    # split by sign so exp never overflows
    pos = x >= 0
    z = np.exp(-np.abs(x))
    return np.where(pos, F32(1.0) / (F32(1.0) + z), z / (F32(1.0) + z)).astype(F32)


def silu(x):
    x = np.asarray(x, dtype=F32)
    return x * sigmoid(x)


def softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=F32)
    e = np.exp(s - np.max(s, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True, dtype=F32)


def causal_attention(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, n_kv_heads: int
) -> np.ndarray:
    """Grouped-query attention of one query position over cached positions.

    q: ``[n_heads, head_dim]``; keys/values: ``[length, n_kv_heads, head_dim]``.
    Causality is the caller's job: pass only positions up to the query.
    Returns the concatenated head outputs, ``[n_heads * head_dim]``.
    """
    q = np.asarray(q, dtype=F32)
    keys = np.asarray(keys, dtype=F32)
    values = np.asarray(values, dtype=F32)
    n_heads, head_dim = q.shape
    if n_kv_heads <= 0 or n_heads % n_kv_heads:
        raise ShapeError(f"{n_heads} query heads not divisible by {n_kv_heads} kv heads")
    if keys.shape[0] == 0:
        raise ValueError("attention over an empty cache")
    if keys.shape[1:] != (n_kv_heads, head_dim) or values.shape != keys.shape:
        raise ShapeError(f"cache slices {keys.shape}/{values.shape} do not match q {q.shape}")
    group = n_heads // n_kv_heads
    qg = q.reshape(n_kv_heads, group, head_dim)
    scale = F32(1.0 / np.sqrt(head_dim))
    # [kv, group, length]
    scores = np.einsum("kgd,lkd->kgl", qg, keys, dtype=F32) * scale
    probs = softmax(scores)
    out = np.einsum("kgl,lkd->kgd", probs, values, dtype=F32)
    return out.reshape(n_heads * head_dim)
