"""Lloyd k-means specialised to scalars, batched over independent rows.

Sorting once turns every assignment step into a ``searchsorted`` against the
midpoints between centers and every update into prefix-sum lookups. Rows are
iterated in lockstep; a row that has converged is a fixed point, so batching
never changes a row's result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RegionConfig:
    k: int = 5
    t: int = 1
    max_iters: int = 50

    def __post_init__(self):
        if not 1 <= self.t < self.k:
            raise ValueError(f"need 1 <= t < k, got t={self.t}, k={self.k}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class KMeansResult:
    labels: np.ndarray   # cluster id per input value, ids ordered by ascending center
    centers: np.ndarray  # ascending; empty clusters already dropped
    iterations: int

    @property
    def k(self) -> int:
        return len(self.centers)


def _canonical(counts: np.ndarray) -> np.ndarray:
    # split points of the non-empty clusters, padded with n for dropped ones
    nonempty_first = np.take_along_axis(counts, np.argsort(counts == 0, axis=1, kind="stable"), axis=1)
    return np.cumsum(nonempty_first, axis=1)[:, :-1]


def _lloyd(v, csum, centers, max_iters):
    """Lloyd iterations on sorted rows ``v``; returns (splits, centers, iters)."""
    r, n = v.shape
    k = centers.shape[1]
    rows = np.arange(r)[:, None]
    splits = None
    it = 0
    for it in range(1, max_iters + 1):
        # inf + inf stays inf, so dropped clusters never receive values;
        # a value exactly between two centers goes to the lower one
        mids = (centers[:, :-1] + centers[:, 1:]) / 2
        cut = np.empty((r, k + 1), dtype=np.int64)
        cut[:, 0], cut[:, -1] = 0, n
        for i in range(r):
            cut[i, 1:-1] = np.searchsorted(v[i], mids[i], side="right")
        counts = np.diff(cut, axis=1)
        sums = csum[rows, cut[:, 1:]] - csum[rows, cut[:, :-1]]
        with np.errstate(invalid="ignore", divide="ignore"):
            centers = np.where(counts > 0, sums / counts, np.inf)
        centers.sort(axis=1)
        new_splits = _canonical(counts)
        if splits is not None and np.array_equal(new_splits, splits):
            break
        splits = new_splits
    return splits, centers, it


def _sse(v, csum, csq, splits):
    """Within-cluster sum of squares for the partitions given by ``splits``."""
    r, n = v.shape
    rows = np.arange(r)[:, None]
    cut = np.concatenate([np.zeros((r, 1), np.int64), splits, np.full((r, 1), n)], axis=1)
    counts = np.diff(cut, axis=1)
    s = csum[rows, cut[:, 1:]] - csum[rows, cut[:, :-1]]
    q = csq[rows, cut[:, 1:]] - csq[rows, cut[:, :-1]]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, q - s * s / counts, 0.0).sum(axis=1)


def _gap_centers(v, k):
    # cut at the k-1 widest gaps between sorted neighbours
    r, n = v.shape
    order = np.argsort(-np.diff(v, axis=1), axis=1, kind="stable")[:, : k - 1]
    cuts = np.sort(order + 1, axis=1)
    bounds = np.concatenate([np.zeros((r, 1), np.int64), cuts, np.full((r, 1), n)], axis=1)
    csum = np.concatenate([np.zeros((r, 1)), np.cumsum(v, axis=1)], axis=1)
    rows = np.arange(r)[:, None]
    return (csum[rows, bounds[:, 1:]] - csum[rows, bounds[:, :-1]]) / np.diff(bounds, axis=1)


def kmeans_1d_batch(values: np.ndarray, k: int, max_iters: int = 50):
    """Run :func:`kmeans_1d` on every row of ``values`` (R, n).

    Returns ``(labels (R, n), centers (R, k), iterations)`` where dropped
    clusters have center ``+inf`` and sit after the live ones.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D array of rows")
    r, n = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} values, got {n}")
    v = np.sort(x, axis=1)
    zero = np.zeros((r, 1))
    csum = np.concatenate([zero, np.cumsum(v, axis=1)], axis=1)
    csq = np.concatenate([zero, np.cumsum(v * v, axis=1)], axis=1)

    quant = np.quantile(v, (np.arange(k) + 0.5) / k, axis=1).T.copy()
    splits, centers, it = _lloyd(v, csum, quant, max_iters)
    if k > 1:
        # quantile starts can settle on a poor fixed point when cluster sizes
        # are very unequal; a start at the widest gaps covers that case
        g_splits, g_centers, g_it = _lloyd(v, csum, _gap_centers(v, k), max_iters)
        better = _sse(v, csum, csq, g_splits) < _sse(v, csum, csq, splits)
        splits = np.where(better[:, None], g_splits, splits)
        centers = np.where(better[:, None], g_centers, centers)
        it = max(it, g_it)

    # cuts are value thresholds, so equal values always share a cluster and a
    # value's label is the number of cluster starts at or below it
    starts = np.take_along_axis(v, np.minimum(splits, n - 1), axis=1)
    labels = np.empty((r, n), dtype=np.int64)
    for i in range(r):
        live = splits[i] < n
        labels[i] = np.searchsorted(starts[i, live], x[i], side="right")
    return labels, centers, it


def kmeans_1d(values, k: int, max_iters: int = 50) -> KMeansResult:
    """Lloyd iterations from two starts, centers at the (i + 0.5)/k
    quantiles and the means of the segments between the k-1 widest gaps;
    the lower-cost result wins.

    Empty clusters are dropped, so fewer than ``k`` clusters may come back.
    """
    x = np.asarray(values, dtype=np.float64).reshape(1, -1)
    labels, centers, it = kmeans_1d_batch(x, k, max_iters)
    live = centers[0][np.isfinite(centers[0])]
    return KMeansResult(labels[0], live, it)


def top_cluster_masks(values: np.ndarray, cfg: RegionConfig):
    """Per row, a boolean mask of values in the ``t`` highest-center clusters.

    Rows that cannot be split (constant, or at most ``t`` live clusters) get
    an all-true mask. Returns ``(masks, degenerate)``.
    """
    x = np.asarray(values, dtype=np.float64)
    r, n = x.shape
    masks = np.ones((r, n), dtype=bool)
    ok = (np.ptp(x, axis=1) > 0) if n >= cfg.k else np.zeros(r, dtype=bool)
    if ok.any():
        labels, centers, _ = kmeans_1d_batch(x[ok], cfg.k, cfg.max_iters)
        k_eff = np.isfinite(centers).sum(axis=1)
        sel = labels >= (k_eff - cfg.t)[:, None]
        split = k_eff > cfg.t
        masks[np.flatnonzero(ok)[split]] = sel[split]
        ok[np.flatnonzero(ok)[~split]] = False
    return masks, ~ok


def top_cluster_mask(values, cfg: RegionConfig) -> np.ndarray | None:
    """Single-row form of :func:`top_cluster_masks`; None when degenerate."""
    masks, degenerate = top_cluster_masks(np.asarray(values, dtype=np.float64).reshape(1, -1), cfg)
    return None if degenerate[0] else masks[0]
