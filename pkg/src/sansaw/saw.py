"""Semantic-aware whitening (SAW): a training-only loss.

For each category the K/C channels with the largest absolute classifier
weight are selected. Group ``m`` stacks, for every category ``c``, the
``m``-th selected channel of ``c`` scaled by that classifier weight, and each
group's covariance is pushed towards identity. Channels picked by several
categories are used once per pick.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .normwhiten import group_whitening


@dataclass(frozen=True)
class ChannelIndexMatrix:
    indexes: np.ndarray  # (C, K/C) int, per row in descending |weight| order
    weights: np.ndarray  # (C, K/C) the signed classifier weights at those indexes

    @property
    def num_categories(self) -> int:
        return self.indexes.shape[0]

    @property
    def num_groups(self) -> int:
        return self.indexes.shape[1]


def select_channel_indexes(classifier_weights: np.ndarray) -> ChannelIndexMatrix:
    w = np.asarray(classifier_weights)
    if w.ndim != 2:
        raise ValueError(f"expected a (C, K) weight matrix, got shape {w.shape}")
    c, k = w.shape
    if k % c:
        raise ValueError(f"channel count {k} is not divisible by category count {c}")
    # stable sort on -|w| keeps lower channel indexes first among ties
    order = np.argsort(-np.abs(w), axis=1, kind="stable")[:, : k // c]
    return ChannelIndexMatrix(order, np.take_along_axis(w, order, axis=1))


def build_groups(f: np.ndarray, idx: ChannelIndexMatrix) -> np.ndarray:
    """Weighted category-interleaved groups, shape (N, K/C, C, H, W)."""
    if idx.indexes.max() >= f.shape[1]:
        raise ValueError("channel index out of range for the feature map")
    # f[:, I.T] is (N, K/C, C, H, W); row c of group m is channel I[c, m]
    return f[:, idx.indexes.T] * idx.weights.T[None, :, :, None, None]


def saw_loss(f: np.ndarray, classifier_weights: np.ndarray):
    """Whitening loss over the SAW groups, averaged over the batch.

    Returns ``(loss, grad_f, grad_weights)`` where ``grad_weights`` has the
    shape of ``classifier_weights`` (C, K); the channel selection itself is
    treated as constant.
    """
    idx = select_channel_indexes(classifier_weights)
    groups = build_groups(f, idx)
    loss, g_groups = group_whitening(groups, scale=1.0 / f.shape[0])
    sel = f[:, idx.indexes.T]                                        # (N, M, C, H, W)
    g_w_sel = (g_groups * sel).sum(axis=(0, 3, 4)).T                 # (C, M)
    g_sel = g_groups * idx.weights.T[None, :, :, None, None]
    m_count = idx.num_groups
    n, k, h, w = f.shape
    # scatter back through a one-hot selection matrix so that a channel
    # picked more than once accumulates every pick
    pick = (idx.indexes.T.reshape(-1, 1) == np.arange(k)).astype(f.dtype)   # (M*C, K)
    grad_f = np.matmul(pick.T, g_sel.reshape(n, -1, h * w)).reshape(f.shape)
    grad_w = np.zeros_like(np.asarray(classifier_weights))
    rows = np.repeat(np.arange(idx.num_categories), m_count)
    np.add.at(grad_w, (rows, idx.indexes.ravel()), g_w_sel.ravel())
    return loss, grad_f, grad_w
