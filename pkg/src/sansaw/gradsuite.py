"""Finite-difference checks for every differentiable operator.

Each check draws a small float64 instance, rejects it when it sits too close
to a kink (ReLU, L1, channel max, channel ranking) and compares the analytic
gradient with central differences. ``run_suite`` is what ``sansaw
gradcheck`` and the test-suite call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import layers
from .evaluation import gradcheck, gradcheck_params
from .normwhiten import batch_covariance, contiguous_groups, giw_loss, iw_loss, standardize, standardize_backward
from .san import SanState, cfr_backward, cfr_refine, objective_features, san_backward, san_forward, san_loss
from .saw import build_groups, saw_loss, select_channel_indexes
from .tensor import make_rng
from .toynet import NetConfig, ToyNet, forward, loss_and_grads, make_pins

TOLERANCE = 1e-3
STEP = 1e-4
KINK_MARGIN = 1e-3
# x / sigma has third derivatives of order 1 / sigma^3, which swamp central
# differences for small gradient entries; nearly flat (but not constant)
# regions are redrawn
SIGMA_MARGIN = 2e-2
MAX_ATTEMPTS = 200


class NoValidInstance(RuntimeError):
    """No sample cleared the kink margin within the attempt budget."""


@dataclass
class CheckResult:
    name: str
    errors: list[float] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.errors) if self.errors else float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.errors) and self.worst < TOLERANCE


# ---------------------------------------------------------------- margins

def whitening_margin(groups: np.ndarray) -> float:
    """Smallest |Psi - I| entry over (N, M, c, H, W) groups."""
    psi = batch_covariance(groups)
    return float(np.abs(psi - np.eye(groups.shape[2])).min())


def ranking_margin(w: np.ndarray) -> float:
    """Smallest gap between neighbouring |w| in each row's top K/C + 1."""
    c, k = w.shape
    keep = min(k, k // c + 1)
    a = -np.sort(-np.abs(w), axis=1)[:, :keep]
    return float(np.min(a[:, :-1] - a[:, 1:])) if keep > 1 else np.inf


def channel_max_margin(f: np.ndarray) -> float:
    """Gap between the largest and second largest channel wherever the
    maximum is positive (post-ReLU zeros tie harmlessly)."""
    top2 = -np.partition(-f, 1, axis=1)[:, :2]
    live = top2[:, 0] > 0
    return float((top2[:, 0] - top2[:, 1])[live].min()) if live.any() else np.inf


def net_margin(net: ToyNet, x: np.ndarray, y: np.ndarray, pins) -> float:
    """Distance of the whole training loss from its nearest kink."""
    cfg = net.cfg
    res = forward(net, x, "train", pins)
    m = np.inf
    cat = net.category_map[y]
    for stage, conv in (("san1", "conv1"), ("san2", "conv2")):
        m = min(m, float(np.abs(res.caches[conv][1]).min()))
        h, out = res.taps[f"{stage}.in"], res.taps[f"{stage}.out"]
        if cfg.san == "on":
            if cfg.cfr:
                m = min(m, channel_max_margin(h))
            sigma = res.caches[stage].sigma
            if np.any((sigma > 0) & (sigma < SIGMA_MARGIN)):
                return 0.0
            resid = np.abs(out - pins[stage]["f_obj"])[np.broadcast_to((cat < cfg.C)[:, None], out.shape)]
            if resid.size:
                m = min(m, float(resid.min()))
        if cfg.whiten == "iw":
            m = min(m, whitening_margin(out[:, None]))
        elif cfg.whiten == "giw":
            m = min(m, whitening_margin(contiguous_groups(out, out.shape[1] // cfg.C)))
        elif cfg.whiten == "saw":
            w = net.params[f"{stage}.cls_w"][: cfg.C, :, 0, 0]
            m = min(m, ranking_margin(w), whitening_margin(build_groups(out, select_channel_indexes(w))))
    return m


def _sample(make: Callable[[np.random.Generator], tuple], margin: Callable[..., float], rng) -> tuple:
    for _ in range(MAX_ATTEMPTS):
        inst = make(rng)
        if margin(*inst) >= KINK_MARGIN:
            return inst
    raise NoValidInstance("could not draw an instance away from every kink")


# ---------------------------------------------------------------- operators

def _linear_probe(out_shape, rng):
    return rng.normal(size=out_shape)


def check_conv2d(rng) -> float:
    ksize = int(rng.choice([1, 3]))
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(4, 3, ksize, ksize))
    b = rng.normal(size=4)
    g = _linear_probe((2, 4, 5, 4), rng)
    y, cache = layers.conv2d(x, w, b)
    gx, gw, gb = layers.conv2d_backward(g, cache)
    errs = [
        gradcheck(lambda v: float((layers.conv2d(v, w, b)[0] * g).sum()), x, gx, STEP),
        gradcheck(lambda v: float((layers.conv2d(x, v, b)[0] * g).sum()), w, gw, STEP),
        gradcheck(lambda v: float((layers.conv2d(x, w, v)[0] * g).sum()), b, gb, STEP),
    ]
    return max(errs)


def check_cross_entropy(rng) -> float:
    logits = rng.normal(size=(2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    _, g, _ = layers.cross_entropy(logits, labels)
    return gradcheck(lambda v: layers.cross_entropy(v, labels)[0], logits, g, STEP)


def check_instance_norm(rng) -> float:
    f = rng.normal(size=(2, 3, 4, 4))
    g = _linear_probe(f.shape, rng)
    _, cache = standardize(f, None)
    return gradcheck(lambda v: float((standardize(v, None)[0] * g).sum()), f, standardize_backward(g, cache), STEP)


def check_regional_norm(rng) -> float:
    f = rng.normal(size=(2, 3, 5, 5))
    region = rng.random((2, 1, 5, 5)) < 0.5
    region[:, 0, 0, :2] = True  # at least two pixels per sample
    g = _linear_probe(f.shape, rng)
    _, cache = standardize(f, region)
    return gradcheck(lambda v: float((standardize(v, region)[0] * g).sum()), f, standardize_backward(g, cache), STEP)


def check_cfr(rng) -> float:
    def make(r):
        fp = r.random((2, 4, 5, 5)) * r.random((2, 1, 5, 5))
        return (fp,)

    (fp,) = _sample(make, channel_max_margin, rng)
    mask = rng.random((2, 1, 5, 5))
    w = rng.normal(scale=0.5, size=(1, 3, 3, 3))
    b = rng.normal(size=1)
    g = _linear_probe(fp.shape, rng)
    _, cache = cfr_refine(fp, mask, w, b)
    g_fp, g_mask, gw, gb = cfr_backward(g, cache)
    loss = lambda a, m_, w_, b_: float((cfr_refine(a, m_, w_, b_)[0] * g).sum())  # noqa: E731
    return max(
        gradcheck(lambda v: loss(v, mask, w, b), fp, g_fp, STEP),
        gradcheck(lambda v: loss(fp, v, w, b), mask, g_mask, STEP),
        gradcheck(lambda v: loss(fp, mask, v, b), w, gw, STEP),
        gradcheck(lambda v: loss(fp, mask, w, v), b, gb, STEP),
    )


def check_san_forward(rng) -> float:
    """The whole SAN transform with its partitions pinned."""
    def make(r):
        f = r.random((2, 4, 6, 6))
        return (f,)

    (f,) = _sample(make, channel_max_margin, rng)
    st = SanState.init(2, 4, rng, dtype=np.float64)
    st.gamma += rng.normal(scale=0.3, size=2)
    st.beta += rng.normal(scale=0.3, size=2)
    _, _, cache = san_forward(f, st)
    regions = cache.regions
    g = _linear_probe(f.shape, rng)
    g_logits = _linear_probe((2, 3, 6, 6), rng)
    g_f, grads = san_backward(g, g_logits, st, cache)

    def loss():
        out, logits, _ = san_forward(f, st, regions=regions)
        return float((out * g).sum() + (logits * g_logits).sum())

    def loss_f(v):
        out, logits, _ = san_forward(v, st, regions=regions)
        return float((out * g).sum() + (logits * g_logits).sum())

    errs = [gradcheck(loss_f, f, g_f, STEP)]
    errs.extend(gradcheck_params(loss, st.params(), grads, step=STEP).values())
    return max(errs)


def check_san_loss(rng) -> float:
    C = 2

    def make(r):
        ft = r.normal(size=(2, 3, 4, 4))
        labels = r.integers(0, C + 1, size=(2, 4, 4))
        f = r.normal(size=ft.shape)
        f_obj = objective_features(f, labels, r.normal(size=C), r.normal(size=C))
        return ft, f_obj, labels

    def margin(ft, f_obj, labels):
        counted = np.broadcast_to((labels < C)[:, None], ft.shape)
        return float(np.abs(ft - f_obj)[counted].min()) if counted.any() else 0.0

    ft, f_obj, labels = _sample(make, margin, rng)
    logits = rng.normal(size=(2, C + 1, 4, 4))
    _, g_ft, g_logits, _ = san_loss(ft, f_obj, logits, labels)
    return max(
        gradcheck(lambda v: san_loss(v, f_obj, logits, labels)[0], ft, g_ft, STEP),
        gradcheck(lambda v: san_loss(ft, f_obj, v, labels)[0], logits, g_logits, STEP),
    )


def check_iw(rng) -> float:
    f = _sample(lambda r: (r.normal(size=(2, 3, 3, 3)),), lambda v: whitening_margin(v[:, None]), rng)[0]
    _, g = iw_loss(f)
    return gradcheck(lambda v: iw_loss(v)[0], f, g, STEP)


def check_giw(rng) -> float:
    f = _sample(lambda r: (r.normal(size=(2, 4, 3, 3)),),
                lambda v: whitening_margin(contiguous_groups(v, 2)), rng)[0]
    _, g = giw_loss(f, 2)
    return gradcheck(lambda v: giw_loss(v, 2)[0], f, g, STEP)


def check_saw(rng) -> float:
    def make(r):
        return r.normal(size=(2, 4, 3, 3)), r.normal(size=(2, 4))

    def margin(f, w):
        return min(ranking_margin(w), whitening_margin(build_groups(f, select_channel_indexes(w))))

    f, w = _sample(make, margin, rng)
    _, gf, gw = saw_loss(f, w)
    return max(
        gradcheck(lambda v: saw_loss(v, w)[0], f, gf, STEP),
        gradcheck(lambda v: saw_loss(f, v)[0], w, gw, STEP),
    )


# (name, san, whiten, cfr) variants of the end-to-end training loss
TOTAL_LOSS_VARIANTS = (
    ("baseline", "off", "none", True),
    ("iw", "off", "iw", True),
    ("giw", "off", "giw", True),
    ("saw_only", "aux", "saw", True),
    ("san_only", "on", "none", True),
    ("full", "on", "saw", True),
    ("full_no_cfr", "on", "saw", False),
)


class _KinkCrossed(Exception):
    pass


def kink_signature(net: ToyNet, x: np.ndarray, y: np.ndarray, pins) -> list[np.ndarray]:
    """Every discrete choice the training loss makes at this point: ReLU
    masks, L1 signs, channel argmaxes and SAW rankings."""
    cfg = net.cfg
    res = forward(net, x, "train", pins)
    cat = net.category_map[y]
    sig = []
    for stage, conv in (("san1", "conv1"), ("san2", "conv2")):
        sig.append(res.caches[conv][1] > 0)
        h, out = res.taps[f"{stage}.in"], res.taps[f"{stage}.out"]
        if cfg.san == "on":
            sig.append(h.argmax(axis=1))
            sig.append(np.sign(out - pins[stage]["f_obj"]) * (cat < cfg.C)[:, None])
        if cfg.whiten == "iw":
            groups = out[:, None]
        elif cfg.whiten == "giw":
            groups = contiguous_groups(out, out.shape[1] // cfg.C)
        elif cfg.whiten == "saw":
            w = net.params[f"{stage}.cls_w"][: cfg.C, :, 0, 0]
            idx = select_channel_indexes(w)
            sig.append(idx.indexes)
            groups = build_groups(out, idx)
        else:
            continue
        sig.append(np.sign(batch_covariance(groups) - np.eye(groups.shape[2])))
    return sig


def check_total_loss(rng, san: str = "on", whiten: str = "saw", cfr: bool = True) -> float:
    """End-to-end training loss of a miniature network.

    Besides the margin pre-filter, every perturbed evaluation must keep the
    base point's :func:`kink_signature`; an instance where a step crosses a
    kink is discarded and redrawn.
    """
    cfg = NetConfig(num_classes=3, k1=4, k2=4, C=2, san=san, whiten=whiten, cfr=cfr)

    def make(r):
        net = ToyNet.init(cfg, int(r.integers(1 << 31)), dtype=np.float64)
        for name in net.params:
            if name.endswith(("gamma", "beta")):
                net.params[name] += r.normal(scale=0.3, size=net.params[name].shape)
        x = r.random((1, 3, 8, 8))
        y = r.integers(0, 3, size=(1, 8, 8))
        return net, x, y, make_pins(net, x, y)

    for _ in range(MAX_ATTEMPTS):
        net, x, y, pins = _sample(make, net_margin, rng)
        base = kink_signature(net, x, y, pins)

        def loss():
            sig = kink_signature(net, x, y, pins)
            if not all(np.array_equal(a, b) for a, b in zip(sig, base)):
                raise _KinkCrossed
            return loss_and_grads(net, x, y, pins)[0]

        _, grads, _ = loss_and_grads(net, x, y, pins)
        try:
            errs = gradcheck_params(loss, net.params, grads, step=STEP)
        except _KinkCrossed:
            continue
        return max(errs.values())
    raise NoValidInstance("every draw put a kink within one finite-difference step")


OPERATORS: dict[str, Callable] = {
    "conv2d": check_conv2d,
    "cross_entropy": check_cross_entropy,
    "instance_norm": check_instance_norm,
    "regional_norm": check_regional_norm,
    "cfr": check_cfr,
    "san_forward": check_san_forward,
    "san_loss": check_san_loss,
    "iw_loss": check_iw,
    "giw_loss": check_giw,
    "saw_loss": check_saw,
}
for _name, _san, _whiten, _cfr in TOTAL_LOSS_VARIANTS:
    OPERATORS[f"total_loss[{_name}]"] = (
        lambda rng, s=_san, w=_whiten, c=_cfr: check_total_loss(rng, s, w, c)
    )


def run_suite(seed: int = 0, instances: int = 3, only=None) -> list[CheckResult]:
    """Run every operator check on ``instances`` independent draws."""
    results = []
    for i, (name, check) in enumerate(OPERATORS.items()):
        if only is not None and name not in only:
            continue
        res = CheckResult(name)
        for j in range(instances):
            res.errors.append(float(check(make_rng(seed * 1000 + i * 10 + j))))
        results.append(res)
    return results
