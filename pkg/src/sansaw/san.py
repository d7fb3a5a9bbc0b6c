"""Semantic-aware normalization (SAN).

Forward pass for one insertion point::

    logits = classifier(F)                     # 1x1 conv, C+1 outputs
    M      = softmax(logits)                   # M[C] is the "other" mask
    F'_c   = F * M_c
    F''_c  = sigmoid(conv3x3([max_k F'_c; mean_k F'_c; M_c])) * F'_c   # CFR
    R_c    = top k-means clusters of mean_k F''_c                       # region
    B_c    = standardize(F''_c, R_c) * gamma_c + beta_c   inside R_c
           = F''_c                                      outside R_c
    out    = sum_c B_c + F * M[C]

Region partitions are piecewise constant in the input, so the backward pass
treats them as fixed. :func:`cfr_refine` and :func:`cfr_backward` are the
single-branch forms of the batched refinement used inside :func:`san_forward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .kmeans import RegionConfig, top_cluster_masks
from .normwhiten import DegenerateRegionError
from .tensor import DEFAULT_EPS, pool_channels, pool_channels_backward, sigmoid

PARAM_NAMES = ("gamma", "beta", "cls_w", "cls_b", "cfr_w", "cfr_b")


@dataclass
class SanState:
    """Learnable SAN parameters for one insertion point."""

    gamma: np.ndarray   # (C,)
    beta: np.ndarray    # (C,)
    cls_w: np.ndarray   # (C+1, K, 1, 1)
    cls_b: np.ndarray   # (C+1,)
    cfr_w: np.ndarray   # (C, 3, 3, 3): one 3-in, 1-out kernel per category
    cfr_b: np.ndarray   # (C,)

    @classmethod
    def init(cls, num_categories: int, channels: int, rng, dtype=np.float32) -> "SanState":
        c, k = num_categories, channels
        bound = 1.0 / np.sqrt(k)
        return cls(
            gamma=np.ones(c, dtype=dtype),
            beta=np.zeros(c, dtype=dtype),
            cls_w=rng.uniform(-bound, bound, size=(c + 1, k, 1, 1)).astype(dtype),
            cls_b=np.zeros(c + 1, dtype=dtype),
            cfr_w=rng.uniform(-0.1, 0.1, size=(c, 3, 3, 3)).astype(dtype),
            cfr_b=np.zeros(c, dtype=dtype),
        )

    @property
    def num_categories(self) -> int:
        return self.gamma.shape[0]

    @property
    def channels(self) -> int:
        return self.cls_w.shape[1]

    def category_weights(self) -> np.ndarray:
        """The C x K classifier block (without the "other" row) used by SAW."""
        return self.cls_w[: self.num_categories, :, 0, 0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def astype(self, dtype) -> "SanState":
        return SanState(**{k: v.astype(dtype) for k, v in self.params().items()})


def predict_masks(f: np.ndarray, state: SanState):
    """Classifier logits and their per-pixel softmax, both (N, C+1, H, W)."""
    logits, _ = layers.conv2d(f, state.cls_w, state.cls_b)
    return logits, layers.softmax(logits)


def mask_branch(f: np.ndarray, masks: np.ndarray, c: int) -> np.ndarray:
    return f * masks[:, c:c + 1]


def cfr_refine(fp: np.ndarray, mask_c: np.ndarray, weight: np.ndarray, bias):
    """Sigmoid-gated refinement of one masked branch; returns (out, cache)."""
    stacked = np.concatenate(
        [pool_channels(fp, "max"), pool_channels(fp, "avg"), mask_c], axis=1
    )
    act, conv_cache = layers.conv2d(stacked, weight, np.atleast_1d(bias))
    gate = sigmoid(act)
    return gate * fp, (fp, gate, conv_cache)


def cfr_backward(grad: np.ndarray, cache):
    """Returns (grad_fp, grad_mask_c, grad_weight, grad_bias)."""
    fp, gate, conv_cache = cache
    g_gate = (grad * fp).sum(axis=1, keepdims=True)
    g_act = g_gate * gate * (1 - gate)
    g_stack, gw, gb = layers.conv2d_backward(g_act, conv_cache)
    g_fp = grad * gate
    g_fp += pool_channels_backward(fp, g_stack[:, 0:1], "max")
    g_fp += pool_channels_backward(fp, g_stack[:, 1:2], "avg")
    return g_fp, g_stack[:, 2:3], gw, gb


def _regions_from_avg(avg: np.ndarray, cfg: RegionConfig) -> np.ndarray:
    *lead, h, w = avg.shape
    masks, _ = top_cluster_masks(avg.reshape(-1, h * w), cfg)
    return masks.reshape(*lead, 1, h, w)


def partition_region(fpp: np.ndarray, cfg: RegionConfig = RegionConfig()) -> np.ndarray:
    """High-activation region of each (K,H,W) map in ``fpp`` (..., K, H, W),
    returned as a boolean (..., 1, H, W) array.

    Channel-averaged activations are split by 1-D k-means; pixels in the
    ``t`` clusters with the highest centers form the region. A map that
    cannot be split yields the whole image.
    """
    return _regions_from_avg(fpp.mean(axis=-3), cfg)


def _batched_cfr(f, masks_c, weight, bias):
    """CFR for all categories at once; f (N,K,H,W), masks_c (N,C,1,H,W).

    The mask is a non-negative per-pixel scalar, so channel max and mean of
    F * M_c are M_c times those of F and are computed once.
    """
    n, C, _, h, w = masks_c.shape
    fmax = f.max(axis=1, keepdims=True)[:, None]
    fmean = f.mean(axis=1, keepdims=True)[:, None]
    stacked = np.concatenate([masks_c * fmax, masks_c * fmean, masks_c], axis=2)
    cols = layers._im2col(stacked.reshape(n * C, 3, h, w), 3).reshape(n, C, 27, h * w)
    act = np.einsum("cj,ncjp->ncp", weight.reshape(C, 27), cols) + bias.reshape(1, C, 1)
    gate = sigmoid(act.reshape(n, C, 1, h, w))
    return gate, (gate, cols, fmean)


def _batched_cfr_backward(g_gate, f, masks_c, cache, weight):
    """From the gradient on the gate (N,C,1,H,W) to (grad_f, grad_masks_c, gw, gb)."""
    gate, cols, fmean = cache
    n, C, _, h, w = gate.shape
    g_act = (g_gate * gate * (1 - gate)).reshape(n, C, h * w)
    gw = np.einsum("ncp,ncjp->cj", g_act, cols).reshape(weight.shape)
    gb = g_act.sum(axis=(0, 2))
    gcols = np.einsum("cj,ncp->ncjp", weight.reshape(C, 27), g_act)
    g_stack = layers._col2im(gcols.reshape(n * C, 27, h * w), (n * C, 3, h, w), 3).reshape(n, C, 3, h, w)
    g_max, g_mean = g_stack[:, :, 0:1], g_stack[:, :, 1:2]
    g_masks = g_max * f.max(axis=1, keepdims=True)[:, None] + g_mean * fmean + g_stack[:, :, 2:3]
    # max pooling routes to the first maximal channel
    g_f = np.repeat((g_mean * masks_c).sum(axis=1) / f.shape[1], f.shape[1], axis=1)
    idx = f.argmax(axis=1)[:, None]
    np.put_along_axis(g_f, idx, np.take_along_axis(g_f, idx, axis=1) + (g_max * masks_c).sum(axis=1), axis=1)
    return g_f, g_masks[:, :, 0], gw, gb


@dataclass
class SanCache:
    f: np.ndarray
    masks: np.ndarray
    cls_cache: tuple
    scale: np.ndarray                  # (N,C,P): F''_c = scale_c * F
    regions: np.ndarray                # (N,C,1,H,W) bool
    mu: np.ndarray                     # (N,C,K) region mean of F''_c
    sigma: np.ndarray                  # (N,C,K)
    count: np.ndarray                  # (N,C,1) region size
    cfr_cache: tuple | None = None
    eps: float = DEFAULT_EPS


def _region_moments(f2: np.ndarray, scale: np.ndarray, region: np.ndarray):
    """Mean and population std of F''_c = scale_c * F over each region.

    ``f2`` is (N,K,P), ``scale`` and ``region`` (N,C,P). Moments are
    accumulated in float64 so the E[x^2] - E[x]^2 form stays accurate.
    """
    r = region.astype(np.float64)
    w = r * scale
    f64 = f2.astype(np.float64)
    count = r.sum(axis=2, keepdims=True)
    if np.any(count == 0):
        raise DegenerateRegionError("region is empty for at least one sample")
    mu = np.matmul(w, np.swapaxes(f64, 1, 2)) / count
    sq = np.matmul(w * scale, np.swapaxes(f64 * f64, 1, 2)) / count
    var = sq - mu * mu
    # below this the difference is float64 rounding, e.g. a one-pixel region
    var = np.where(var > 1e-12 * sq, var, 0.0)
    return mu, np.sqrt(var), count


def san_forward(
    f: np.ndarray,
    state: SanState,
    cfg: RegionConfig = RegionConfig(),
    eps: float = DEFAULT_EPS,
    use_cfr: bool = True,
    regions=None,
):
    """Apply SAN. Identical in training and inference.

    Every branch is a per-pixel rescaling of F, so all categories are folded
    into per-(sample, channel, pixel) coefficients instead of materializing
    the (N,C,K,H,W) stack. ``regions`` ((N,C,1,H,W) boolean) pins the
    partitions, which gradient checks need. Returns ``(out, logits, cache)``.
    """
    C = state.num_categories
    if f.shape[1] != state.channels:
        raise ValueError(f"features have {f.shape[1]} channels, SAN expects {state.channels}")
    n, k, h, w = f.shape
    logits, cls_cache = layers.conv2d(f, state.cls_w, state.cls_b)
    masks = layers.softmax(logits)
    mc = masks[:, :C, None]
    scale, cfr_cache = mc, None
    if use_cfr:
        gate, cfr_cache = _batched_cfr(f, mc, state.cfr_w, state.cfr_b)
        scale = gate * mc
    if regions is None:
        avg = (scale * f.mean(axis=1, keepdims=True)[:, None])[:, :, 0]
        region = _regions_from_avg(avg, cfg)
    else:
        region = np.asarray(regions, dtype=bool)
    s2 = scale.reshape(n, C, h * w)
    r2 = region.reshape(n, C, h * w)
    f2 = f.reshape(n, k, h * w)
    mu, sigma, count = _region_moments(f2, s2, r2)
    g = state.gamma.astype(np.float64).reshape(1, C, 1)
    b = state.beta.astype(np.float64).reshape(1, C, 1)
    # inside R_c: gamma * (s F - mu) / d + beta; outside: s F. The folded
    # form cancels two terms of size gamma * mu / eps when sigma is 0, so it
    # runs in float64 and a constant region (centered values exactly 0)
    # maps straight to beta.
    flat = sigma == 0
    a_in = np.where(flat, 0.0, g / (sigma + eps))        # (N,C,K)
    shift = np.where(flat, b, b - a_in * mu)
    s64 = s2.astype(np.float64)
    rf = r2.astype(np.float64)
    coef = np.matmul(np.swapaxes(a_in, 1, 2), s64 * rf) + (s64 * (1 - rf)).sum(axis=1, keepdims=True)
    coef += masks[:, C:C + 1].reshape(n, 1, h * w)
    out = f2.astype(np.float64) * coef + np.matmul(np.swapaxes(shift, 1, 2), rf)
    cache = SanCache(f, masks, cls_cache, s2, region, mu, sigma, count, cfr_cache, eps)
    return out.reshape(f.shape).astype(f.dtype), logits, cache


def san_backward(grad_out: np.ndarray, grad_logits, state: SanState, cache: SanCache):
    """Backward through :func:`san_forward`.

    ``grad_logits`` is any direct gradient on the classifier logits (from the
    mask cross-entropy), or None. Returns (grad_f, param_grads).
    """
    C = state.num_categories
    f, masks = cache.f, cache.masks
    n, k, h, w = f.shape
    dt = f.dtype
    s2, mu, sigma, m = cache.scale, cache.mu, cache.sigma, cache.count
    r2 = cache.regions.reshape(n, C, h * w).astype(dt)
    f2 = f.reshape(n, k, h * w)
    G = grad_out.reshape(n, k, h * w)
    gf = G * f2
    grads = {name: np.zeros_like(p) for name, p in state.params().items()}

    d = sigma + cache.eps
    rg = np.matmul(r2, np.swapaxes(G, 1, 2)).astype(np.float64)            # (N,C,K) sum_R G
    wgf = np.matmul(r2 * s2, np.swapaxes(gf, 1, 2)).astype(np.float64)     # sum_R s G F
    inner = wgf - mu * rg                                                  # sum_R G (x - mu)
    gamma = state.gamma.astype(np.float64).reshape(1, C, 1)
    grads["gamma"] = np.where(sigma > 0, inner / d, 0.0).sum(axis=(0, 2)).astype(state.gamma.dtype)
    grads["beta"] = rg.sum(axis=(0, 2)).astype(state.beta.dtype)

    # standardize backward with upstream gamma * G inside the region:
    # g_x = R (A G + B + D x) + (1 - R) G with x = s F
    # a flat region outputs the constant beta, so its input gradient is 0
    live = sigma > 0
    safe = np.where(live, sigma, 1.0)
    coefp = np.where(live, gamma * inner / (m * safe * d * d), 0.0)
    A = np.where(live, gamma / d, 0.0).astype(dt)
    B = np.where(live, -gamma * rg / (m * d) + mu * coefp, 0.0).astype(dt)
    D = (-coefp).astype(dt)
    At, Bt, Dt = (np.swapaxes(t, 1, 2) for t in (A, B, D))
    sr = s2 * r2
    g_f = (
        G * (np.matmul(At, sr) + (s2 * (1 - r2)).sum(axis=1, keepdims=True))
        + np.matmul(Bt, sr)
        + f2 * np.matmul(Dt, sr * s2)
        + G * masks[:, C:C + 1].reshape(n, 1, h * w)
    )
    g_scale = (
        r2 * (np.matmul(A, gf) + np.matmul(B, f2) + s2 * np.matmul(D, f2 * f2))
        + (1 - r2) * gf.sum(axis=1, keepdims=True)
    ).reshape(n, C, 1, h, w)

    g_masks = np.empty_like(masks)
    g_masks[:, C] = gf.sum(axis=1).reshape(n, h, w)
    g_f = g_f.reshape(f.shape)
    if cache.cfr_cache is not None:
        gate = cache.cfr_cache[0]
        mc = masks[:, :C, None]
        g_fc, g_m, gw, gb = _batched_cfr_backward(g_scale * mc, f, mc, cache.cfr_cache, state.cfr_w)
        grads["cfr_w"], grads["cfr_b"] = gw, gb
        g_masks[:, :C] = (g_scale * gate)[:, :, 0] + g_m
        g_f = g_f + g_fc
    else:
        g_masks[:, :C] = g_scale[:, :, 0]
    # softmax backward: dz = M * (dM - sum(M * dM))
    g_logits = masks * (g_masks - (masks * g_masks).sum(axis=1, keepdims=True))
    if grad_logits is not None:
        g_logits = g_logits + grad_logits
    gx, gw, gb = layers.conv2d_backward(g_logits, cache.cls_cache)
    grads["cls_w"] = gw
    grads["cls_b"] = gb
    return (g_f + gx).astype(dt, copy=False), grads


def objective_features(f: np.ndarray, labels: np.ndarray, gamma, beta, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Label-driven target: each category's pixels standardized over that
    category's ground-truth region, then scaled and shifted by its affine.

    ``labels`` holds category ids in 0..C where C means "other"; those
    pixels copy ``f``. A category missing from a sample leaves it untouched.
    """
    C = len(gamma)
    n, k, h, w = f.shape
    labels = np.asarray(labels).reshape(n, h * w)
    onehot = labels[:, None] == np.arange(C).reshape(1, C, 1)     # (N,C,P)
    present = onehot.any(axis=2, keepdims=True)
    # absent categories use a dummy full region and are masked out below
    region = onehot | ~present
    f2 = f.reshape(n, k, h * w)
    mu, sigma, _ = _region_moments(f2, np.ones(region.shape), region)
    g = np.asarray(gamma, dtype=np.float64).reshape(1, C, 1)
    b = np.asarray(beta, dtype=np.float64).reshape(1, C, 1)
    a = g / (sigma + eps)                                             # (N,C,K)
    hot = onehot.astype(np.float64)
    # per pixel, exactly one category contributes a * (f - mu) + beta
    aligned = f2 * np.matmul(np.swapaxes(a, 1, 2), hot) + np.matmul(np.swapaxes(b - a * mu, 1, 2), hot)
    out = np.where((labels < C)[:, None], aligned, f2)
    return out.reshape(f.shape).astype(f.dtype)


def san_loss(f_tilde: np.ndarray, f_obj: np.ndarray, logits: np.ndarray, labels: np.ndarray):
    """Mask cross-entropy plus the per-pixel L1 gap to the objective features.

    The L1 term is the mean absolute difference over every channel of the
    pixels whose category is one of the aligned ones. ``f_obj`` is a fixed
    target. Returns ``(loss, grad_f_tilde, grad_logits, parts)``.
    """
    C = logits.shape[1] - 1
    ce, g_logits, _ = layers.cross_entropy(logits, labels)
    counted = (np.asarray(labels) < C)[:, None]
    n_el = int(counted.sum()) * f_tilde.shape[1]
    if n_el == 0:
        return ce, np.zeros_like(f_tilde), g_logits, {"ce": ce, "l1": 0.0}
    resid = f_tilde - f_obj
    l1 = float((np.abs(resid) * counted).sum() / n_el)
    g_ft = np.sign(resid) * counted / n_el
    return ce + l1, g_ft.astype(f_tilde.dtype), g_logits, {"ce": ce, "l1": l1}
