"""Convolution and cross-entropy with hand-written backward passes."""

from __future__ import annotations

import numpy as np


def _im2col(x: np.ndarray, ksize: int) -> np.ndarray:
    n, k, h, w = x.shape
    if ksize == 1:
        return x.reshape(n, k, h * w)
    pad = ksize // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, k, ksize, ksize, h, w), dtype=x.dtype)
    for dy in range(ksize):
        for dx in range(ksize):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, k * ksize * ksize, h * w)


def _col2im(cols: np.ndarray, shape, ksize: int) -> np.ndarray:
    n, k, h, w = shape
    if ksize == 1:
        return cols.reshape(shape)
    pad = ksize // 2
    cols = cols.reshape(n, k, ksize, ksize, h, w)
    xp = np.zeros((n, k, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for dy in range(ksize):
        for dx in range(ksize):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None):
    """Stride-1 cross-correlation with 'same' zero padding.

    ``weight`` is (out, in, k, k) with k in {1, 3}. Returns the output and a
    cache for :func:`conv2d_backward`.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    out_ch, in_ch, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if x.shape[1] != in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {in_ch}")
    n, _, h, w = x.shape
    cols = _im2col(x, kh)
    y = np.matmul(weight.reshape(out_ch, -1), cols)
    if bias is not None:
        y += bias.reshape(1, out_ch, 1)
    return y.reshape(n, out_ch, h, w), (x.shape, cols, weight)


def conv2d_backward(grad: np.ndarray, cache, need_input: bool = True):
    """Returns (grad_x, grad_weight, grad_bias); grad_x is None unless requested."""
    x_shape, cols, weight = cache
    out_ch = weight.shape[0]
    g = grad.reshape(grad.shape[0], out_ch, -1)
    gw = np.matmul(g, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(weight.shape)
    gb = g.sum(axis=(0, 2))
    gx = None
    if need_input:
        gcols = np.matmul(weight.reshape(out_ch, -1).T, g)
        gx = _col2im(gcols, x_shape, weight.shape[2])
    return gx, gw, gb


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Pixel-mean softmax cross-entropy over the channel axis.

    ``labels`` is an integer (N,H,W) map. Returns (loss, grad_logits, probs).
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label ids must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    count = n * h * w
    loss = float(-picked.sum() / count)
    probs = np.exp(logp)
    grad = probs.copy()
    np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1, axis=1)
    grad /= count
    return loss, grad, probs
