"""Segmentation metrics, feature-alignment diagnostics and gradient checks."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .normwhiten import mean_abs_offdiag

CSV_FIELDS = ("run_id", "domain", "class_id", "iou", "miou", "center_dist", "offdiag")


# ---------------------------------------------------------------- metrics

def confusion_matrix(preds, gts, num_classes: int) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction."""
    preds = np.asarray(preds).ravel()
    gts = np.asarray(gts).ravel()
    if preds.shape != gts.shape:
        raise ValueError("prediction and ground-truth maps differ in size")
    flat = gts.astype(np.int64) * num_classes + preds.astype(np.int64)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray):
    """Per-class IoU (NaN where the class never appears) and their mean."""
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    iou = np.full(len(tp), np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    mean = float(np.nanmean(iou)) if present.any() else float("nan")
    return iou, mean


def miou(preds, gts, num_classes: int):
    if np.shape(preds) != np.shape(gts):
        raise ValueError(f"shape mismatch {np.shape(preds)} vs {np.shape(gts)}")
    return iou_from_confusion(confusion_matrix(preds, gts, num_classes))


# ---------------------------------------------------------------- alignment

@dataclass
class AlignmentReport:
    center_dist: dict[int, float]                  # category -> mean pairwise center distance
    offdiag: dict[str, float]                      # domain -> mean |off-diagonal| of Psi
    stats: dict[str, dict[int, tuple[float, float]]] = field(default_factory=dict)
    grouped_offdiag: dict[str, float] = field(default_factory=dict)

    def mean_center_dist(self) -> float:
        vals = list(self.center_dist.values())
        return float(np.mean(vals)) if vals else 0.0


def _category_center(feats: np.ndarray, labels: np.ndarray, c: int):
    sel = labels == c  # (N,H,W)
    if not sel.any():
        return None
    # (K, pixels) over every sample of the domain
    vals = np.moveaxis(feats, 1, 0)[:, sel]
    return vals.mean(axis=1), float(vals.mean()), float(vals.std())


def alignment_report(features: dict[str, np.ndarray], labels: dict[str, np.ndarray], idx=None) -> AlignmentReport:
    """Compare per-category feature centers across domains.

    ``features[d]`` is (N,K,H,W) and ``labels[d]`` the matching (N,H,W)
    category map. With a channel index matrix, also reports the mean
    off-diagonal covariance inside its groups (weights ignored).
    """
    domains = list(features)
    if len(domains) < 2:
        raise ValueError("alignment needs at least two domains")
    cats = sorted(set().union(*(np.unique(labels[d]).tolist() for d in domains)))
    centers: dict[int, dict[str, np.ndarray]] = {c: {} for c in cats}
    report = AlignmentReport({}, {})
    for d in domains:
        report.stats[d] = {}
        for c in cats:
            got = _category_center(features[d], labels[d], c)
            if got is not None:
                centers[c][d] = got[0]
                report.stats[d][c] = (got[1], got[2])
        report.offdiag[d] = mean_abs_offdiag(features[d])
        if idx is not None:
            grouped = features[d][:, idx.indexes.T]  # (N, M, C, H, W)
            n, m = grouped.shape[:2]
            report.grouped_offdiag[d] = mean_abs_offdiag(grouped.reshape(n * m, *grouped.shape[2:]))
    for c in cats:
        pairs = [
            float(np.linalg.norm(centers[c][a] - centers[c][b]))
            for a, b in itertools.combinations(sorted(centers[c]), 2)
        ]
        if pairs:
            report.center_dist[c] = float(np.mean(pairs))
    return report


# ---------------------------------------------------------------- gradcheck

class GradcheckError(RuntimeError):
    pass


def gradcheck(fn: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, step: float = 1e-4) -> float:
    """Worst relative error between ``analytic`` and central differences of
    ``fn`` at ``x``: max |a - n| / max(|a|, |n|, 1e-8)."""
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        a = analytic.reshape(-1)[i]
        if not (np.isfinite(num) and np.isfinite(a)):
            raise GradcheckError(f"non-finite value at coordinate {i}: analytic={a}, numeric={num}")
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


def gradcheck_params(loss_fn: Callable[[], float], params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                     names: Iterable[str] | None = None, step: float = 1e-4) -> dict[str, float]:
    """Like :func:`gradcheck` but perturbs named arrays in place."""
    out = {}
    for name in names if names is not None else params:
        p = params[name]
        flat = p.reshape(-1)
        worst = 0.0
        g = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn()
            flat[i] = orig - step
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            if not (np.isfinite(num) and np.isfinite(g[i])):
                raise GradcheckError(f"{name}[{i}]: non-finite value")
            worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-8))
        out[name] = worst
    return out


# ---------------------------------------------------------------- CSV

def write_metrics_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_FIELDS})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metric_rows(run_id: str, domain: str, iou: np.ndarray, mean: float,
                center_dist: float = float("nan"), offdiag: float = float("nan")) -> list[dict]:
    rows = [
        {"run_id": run_id, "domain": domain, "class_id": c, "iou": f"{v:.6f}",
         "miou": f"{mean:.6f}", "center_dist": "", "offdiag": ""}
        for c, v in enumerate(iou) if not np.isnan(v)
    ]
    rows.append({"run_id": run_id, "domain": domain, "class_id": -1, "iou": "",
                 "miou": f"{mean:.6f}", "center_dist": f"{center_dist:.6f}", "offdiag": f"{offdiag:.6f}"})
    return rows
