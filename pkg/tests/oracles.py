"""Brute-force references shared by the unit tests and the acceptance suite.

Each one is written straight from the definition with explicit loops and
no shared code with the package beyond ``covariance`` and ``SanState``.
"""

import numpy as np

from sansaw.normwhiten import covariance
from sansaw.san import SanState


def dp_kmeans(values, k):
    """Optimal 1-D k-means by dynamic programming over sorted prefixes.

    Returns (cost, sorted centers)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)

    def sse(i, j):  # cost of v[i:j] as one cluster
        seg = v[i:j]
        return float(((seg - seg.mean()) ** 2).sum())

    cost = np.full((k + 1, n + 1), np.inf)
    back = np.zeros((k + 1, n + 1), dtype=int)
    cost[0, 0] = 0.0
    for m in range(1, k + 1):
        for j in range(m, n + 1):
            for i in range(m - 1, j):
                c = cost[m - 1, i] + sse(i, j)
                if c < cost[m, j]:
                    cost[m, j], back[m, j] = c, i
    centers, j = [], n
    for m in range(k, 0, -1):
        i = back[m, j]
        centers.append(v[i:j].mean())
        j = i
    return cost[k, n], np.array(centers[::-1])


def brute_cov(f):
    k, h, w = f.shape
    x = f.reshape(k, -1)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            mi, mj = sum(x[i]) / (h * w), sum(x[j]) / (h * w)
            out[i, j] = sum((x[i, p] - mi) * (x[j, p] - mj) for p in range(h * w)) / (h * w)
    return out


def brute_saw(f, w):
    """Explicit group assembly and per-group |cov - I|_1, averaged over N."""
    C, K = w.shape
    per = K // C
    idx = [sorted(range(K), key=lambda j: (-abs(w[c, j]), j))[:per] for c in range(C)]
    total = 0.0
    for n in range(f.shape[0]):
        for m in range(per):
            group = np.stack([f[n, idx[c][m]] * w[c, idx[c][m]] for c in range(C)])
            total += np.abs(covariance(group) - np.eye(C)).sum()
    return total / f.shape[0]


def direct_conv(x, w, b):
    """Summation oracle: same padding, stride 1."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, cout, h, wd))
    for i in range(n):
        for o in range(cout):
            for y in range(h):
                for z in range(wd):
                    s = b[o]
                    for c in range(cin):
                        for dy in range(k):
                            for dx in range(k):
                                yy, zz = y + dy - p, z + dx - p
                                if 0 <= yy < h and 0 <= zz < wd:
                                    s += x[i, c, yy, zz] * w[o, c, dy, dx]
                    out[i, o, y, z] = s
    return out


def hand_iou(pred, gt, c):
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        tp += p == c and g == c
        fp += p == c and g != c
        fn += p != c and g == c
    return tp / (tp + fp + fn) if tp + fp + fn else np.nan


def hard_features(rng, labels, C, K=8, scale=50.0):
    """Features whose first C+1 channels spell out the category one-hot."""
    n, h, w = labels.shape
    f = rng.integers(0, 16, size=(n, K, h, w)) / 16.0   # dyadic, so sums are exact
    f[:, : C + 1] = scale * (labels[:, None] == np.arange(C + 1)[None, :, None, None])
    # the last channel cancels the random ones, so the channel mean is the
    # same at every pixel and each region is a whole category
    f[:, -1] = 1.0 - f[:, C + 1:-1].sum(axis=1)
    st = SanState.init(C, K, rng, dtype=np.float64)
    st.cls_w[:] = 0
    st.cls_w[np.arange(C + 1), np.arange(C + 1)] = 1.0
    return f, st
