"""Dense tensor helpers shared by every other module.

Tensors are plain ``numpy.ndarray`` values in row-major ``(n, k, h, w)``
order. Model state is float32; gradient checks run the same code on float64
inputs, every operator keeps the dtype it is given.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DEFAULT_EPS = 1e-5
MAX_RANK = 4


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator (PCG64) whose stream is stable across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ValueError(f"rank must be between 1 and {MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all extents must be >= 1, got {dims}")
    return dims


def create(dims, fill="zeros", *, values=None, lo=0.0, hi=1.0, rng=None, dtype=np.float32):
    """Build a tensor of shape ``dims``.

    ``fill`` is one of ``zeros``, ``ones``, ``uniform`` (needs ``rng``) or
    ``explicit`` (needs ``values``, read in row-major order).
    """
    dims = _check_dims(dims)
    if fill == "zeros":
        return np.zeros(dims, dtype=dtype)
    if fill == "ones":
        return np.ones(dims, dtype=dtype)
    if fill == "uniform":
        if rng is None:
            raise ValueError("uniform fill needs an rng")
        return rng.uniform(lo, hi, size=dims).astype(dtype)
    if fill == "explicit":
        data = np.asarray(values, dtype=dtype).reshape(-1)
        if data.size != int(np.prod(dims)):
            raise ValueError(f"{data.size} values cannot fill shape {dims}")
        return data.reshape(dims).copy()
    raise ValueError(f"unknown fill rule {fill!r}")


def _require_rank4(t: np.ndarray) -> None:
    if t.ndim != 4:
        raise ValueError(f"expected a rank-4 (N,K,H,W) tensor, got shape {t.shape}")


def reduce_spatial(t: np.ndarray, stat: str = "mean", eps: float = 0.0) -> np.ndarray:
    """Per-(sample, channel) mean or population std over H x W, shape (N, K)."""
    _require_rank4(t)
    if stat == "mean":
        return t.mean(axis=(2, 3))
    if stat == "std":
        mu = t.mean(axis=(2, 3), keepdims=True)
        return np.sqrt(((t - mu) ** 2).mean(axis=(2, 3)) + eps)
    raise ValueError(f"unknown statistic {stat!r}")


def pool_channels(t: np.ndarray, mode: str = "avg") -> np.ndarray:
    """Reduce over the channel axis at every pixel, keeping a unit channel dim."""
    _require_rank4(t)
    if mode == "avg":
        return t.mean(axis=1, keepdims=True)
    if mode == "max":
        return t.max(axis=1, keepdims=True)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_channels_backward(t: np.ndarray, grad: np.ndarray, mode: str = "avg") -> np.ndarray:
    """Gradient of :func:`pool_channels`; max routes to the first maximal channel."""
    k = t.shape[1]
    if mode == "avg":
        return np.broadcast_to(grad / k, t.shape).astype(t.dtype, copy=True)
    if mode == "max":
        out = np.zeros_like(t)
        idx = t.argmax(axis=1)[:, None]
        np.put_along_axis(out, idx, grad, axis=1)
        return out
    raise ValueError(f"unknown pooling mode {mode!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    if a.ndim == 4 and b.ndim == 4:
        if b.shape[1] == 1 and (a.shape[0], a.shape[2], a.shape[3]) == (b.shape[0], b.shape[2], b.shape[3]):
            return True
        if a.shape[1] == 1 and (a.shape[0], a.shape[2], a.shape[3]) == (b.shape[0], b.shape[2], b.shape[3]):
            return True
    return False


def ew(t: np.ndarray, other=None, op: str = "add", eps: float = DEFAULT_EPS) -> np.ndarray:
    """Elementwise op. Binary ops accept equal shapes, a scalar, or an
    (N,1,H,W) map broadcast over channels; nothing else broadcasts."""
    if op == "sigmoid":
        return sigmoid(t)
    if op == "relu":
        return np.maximum(t, 0)
    if op == "abs":
        return np.abs(t)
    if other is None:
        raise ValueError(f"{op} needs a second operand")
    if isinstance(other, np.ndarray) and other.ndim > 0 and not _broadcast_ok(t, other):
        raise ValueError(f"cannot combine shapes {t.shape} and {other.shape}")
    if op == "add":
        return t + other
    if op == "sub":
        return t - other
    if op == "mul":
        return t * other
    if op == "div":
        # guard the denominator away from zero, keeping its sign
        den = np.where(np.asarray(other) >= 0, np.maximum(other, eps), np.minimum(other, -eps))
        return t / den
    raise ValueError(f"unknown op {op!r}")
