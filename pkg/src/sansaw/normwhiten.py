"""Instance / regional normalization and the IW / GIW whitening losses.

Every loss returns ``(loss, grad)`` with ``grad`` the analytic gradient with
respect to the input feature map. Variances are population variances and
``eps`` only ever appears in normalization denominators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DEFAULT_EPS, _require_rank4


@dataclass(frozen=True)
class NormConfig:
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


class DegenerateRegionError(ValueError):
    """Raised when a region selects no pixel of some sample."""


@dataclass
class StandardizeCache:
    region: np.ndarray | None  # (N,1,H,W) float mask, None = whole image
    centered: np.ndarray
    count: np.ndarray
    sigma: np.ndarray
    denom: np.ndarray


_HW = (-2, -1)


def _stats(f, region):
    if region is None:
        count = np.asarray(f.shape[-2] * f.shape[-1], dtype=f.dtype)
        mu = f.mean(axis=_HW, keepdims=True)
        centered = f - mu
    else:
        count = region.sum(axis=_HW, keepdims=True)
        mu = (f * region).sum(axis=_HW, keepdims=True) / count
        centered = (f - mu) * region
    var = (centered * centered).sum(axis=_HW, keepdims=True) / count
    return centered, count, np.sqrt(var)


def standardize(f: np.ndarray, region=None, eps: float = DEFAULT_EPS):
    """Standardize every (H, W) plane of ``f`` over ``region`` (all pixels
    if None). ``region`` broadcasts against ``f``, e.g. (N,1,H,W) for an
    (N,K,H,W) map; a bare (N,H,W) region is also accepted for rank-4 ``f``.

    Pixels outside the region pass through untouched. Returns the output and
    a cache for :func:`standardize_backward`.
    """
    if f.ndim < 3:
        raise ValueError(f"expected at least (., H, W), got shape {f.shape}")
    if region is not None:
        region = np.asarray(region).astype(f.dtype, copy=False)
        if region.ndim == 3 and f.ndim == 4:
            region = region[:, None]
        if np.any(region.sum(axis=_HW) == 0):
            raise DegenerateRegionError("region is empty for at least one sample")
    centered, count, sigma = _stats(f, region)
    denom = sigma + eps
    if region is None:
        out = centered / denom
    else:
        out = np.where(region > 0, centered / denom, f)
    return out, StandardizeCache(region, centered, count, sigma, denom)


def standardize_backward(grad: np.ndarray, cache: StandardizeCache) -> np.ndarray:
    region, xc, count, sigma, denom = (
        cache.region, cache.centered, cache.count, cache.sigma, cache.denom,
    )
    g_in = grad if region is None else grad * region
    g_mean = g_in.sum(axis=_HW, keepdims=True) / count
    # d sigma / d x = x_c / (count * sigma); zero when the channel is constant
    safe = np.where(sigma > 0, sigma, 1)
    coef = np.where(sigma > 0, (g_in * xc).sum(axis=_HW, keepdims=True) / (count * safe * denom**2), 0)
    centered_grad = g_in - g_mean if region is None else (g_in - g_mean * region)
    inside = centered_grad / denom - xc * coef
    if region is None:
        return inside
    return np.where(region > 0, inside, grad)


def instance_normalize(f: np.ndarray, cfg: NormConfig = NormConfig()) -> np.ndarray:
    _require_rank4(f)
    return standardize(f, None, cfg.eps)[0]


def regional_normalize(f: np.ndarray, region: np.ndarray, cfg: NormConfig = NormConfig()) -> np.ndarray:
    """Standardize inside ``region``, an (N,H,W) or (N,1,H,W) boolean map."""
    _require_rank4(f)
    return standardize(f, region, cfg.eps)[0]


def covariance(f_n: np.ndarray) -> np.ndarray:
    """Channel covariance of one sample (K,H,W) with the 1/HW factor."""
    if f_n.ndim != 3:
        raise ValueError(f"expected (K,H,W), got shape {f_n.shape}")
    return batch_covariance(f_n[None])[0]


def batch_covariance(f: np.ndarray) -> np.ndarray:
    """Covariance per leading index: (..., K, H, W) -> (..., K, K)."""
    x = f.reshape(*f.shape[:-2], -1)
    x = x - x.mean(axis=-1, keepdims=True)
    p = np.matmul(x, np.swapaxes(x, -1, -2)) / x.shape[-1]
    # averaging with the transpose makes the result exactly symmetric
    return (p + np.swapaxes(p, -1, -2)) / 2


def group_whitening(groups: np.ndarray, scale: float = 1.0):
    """``scale * sum |Psi(G) - I|_1`` over groups shaped (N, M, c, H, W).

    Returns the loss and its gradient with respect to ``groups``.
    """
    n, m, c, h, w = groups.shape
    x = groups.reshape(n, m, c, h * w)
    x = x - x.mean(axis=-1, keepdims=True)
    p = np.matmul(x, np.swapaxes(x, -1, -2)) / (h * w)
    psi = (p + np.swapaxes(p, -1, -2)) / 2
    diff = psi - np.eye(c, dtype=groups.dtype)
    loss = scale * float(np.abs(diff).sum())
    # sign(0) = 0 is the subgradient used at the kink
    s = np.sign(diff)
    grad = (2.0 * scale / (h * w)) * np.matmul(s, x)
    return loss, grad.reshape(groups.shape)


def iw_loss(f: np.ndarray):
    """Instance whitening: sum over samples of |Psi(F_n) - I|_1 (no 1/N)."""
    _require_rank4(f)
    loss, grad = group_whitening(f[:, None], scale=1.0)
    return loss, grad[:, 0]


def contiguous_groups(f: np.ndarray, num_groups: int) -> np.ndarray:
    n, k, h, w = f.shape
    if num_groups < 1 or k % num_groups:
        raise ValueError(f"{k} channels cannot be split into {num_groups} equal groups")
    return f.reshape(n, num_groups, k // num_groups, h, w)


def giw_loss(f: np.ndarray, num_groups: int):
    """Group instance whitening over contiguous equal channel slices, 1/N averaged."""
    _require_rank4(f)
    groups = contiguous_groups(f, num_groups)
    loss, grad = group_whitening(groups, scale=1.0 / f.shape[0])
    return loss, grad.reshape(f.shape)


def mean_abs_offdiag(f: np.ndarray) -> float:
    """Mean |off-diagonal| of per-sample covariance; 0 for a single channel."""
    k = f.shape[1]
    if k < 2:
        return 0.0
    psi = batch_covariance(f)
    off = ~np.eye(k, dtype=bool)
    return float(np.abs(psi[:, off]).mean())
