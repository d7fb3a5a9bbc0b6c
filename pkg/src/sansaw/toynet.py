"""A two-stage segmentation network with SAN / whitening after each stage.

::

    x -> conv3x3 -> relu -> [SAN] -> conv3x3 -> relu -> [SAN] -> conv1x1 -> logits

No downsampling, so logits share the input resolution. Whitening losses
(IW, GIW or SAW) look at each stage output but never change it.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import layers
from .kmeans import RegionConfig
from .normwhiten import giw_loss, iw_loss
from .san import SanState, objective_features, san_backward, san_forward, san_loss
from .saw import saw_loss
from .tensor import DEFAULT_EPS, make_rng

log = logging.getLogger(__name__)

SAN_MODES = ("on", "off", "aux")
WHITEN_MODES = ("none", "iw", "giw", "saw")


@dataclass
class NetConfig:
    num_classes: int = 4
    k1: int = 16
    k2: int = 16
    C: int = 4
    san: str = "off"          # "aux": classifier only, features untouched
    cfr: bool = True
    whiten: str = "none"
    k: int = 5
    t: int = 1
    eps: float = DEFAULT_EPS
    lambda_san: float = 1.0
    lambda_saw: float = 1.0

    def __post_init__(self):
        if self.san not in SAN_MODES:
            raise ValueError(f"san must be one of {SAN_MODES}, got {self.san!r}")
        if self.whiten not in WHITEN_MODES:
            raise ValueError(f"whiten must be one of {WHITEN_MODES}, got {self.whiten!r}")
        for name in ("k1", "k2"):
            if getattr(self, name) % self.C:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by C={self.C}")
        if self.whiten == "saw" and self.san == "off":
            raise ValueError("saw grouping needs the SAN classifier (san on or aux)")
        if self.C > self.num_classes:
            raise ValueError(f"C={self.C} exceeds num_classes={self.num_classes}")
        RegionConfig(self.k, self.t)

    @property
    def region(self) -> RegionConfig:
        return RegionConfig(self.k, self.t)


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 2
    poly_power: float = 0.9
    iters: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1 or self.batch < 1:
            raise ValueError("iters and batch must be >= 1")
        if min(self.lr0, self.momentum, self.weight_decay, self.poly_power) < 0:
            raise ValueError("learning-rate settings must be non-negative")


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ToyNet:
    cfg: NetConfig
    params: dict[str, np.ndarray]
    category_map: np.ndarray  # class id -> category id in 0..C (C = "other")

    @classmethod
    def init(cls, cfg: NetConfig, seed: int, category_map=None, dtype=np.float32) -> "ToyNet":
        rng = make_rng(seed)
        p = {
            "conv1.w": _he(rng, (cfg.k1, 3, 3, 3), dtype),
            "conv1.b": np.zeros(cfg.k1, dtype=dtype),
            "conv2.w": _he(rng, (cfg.k2, cfg.k1, 3, 3), dtype),
            "conv2.b": np.zeros(cfg.k2, dtype=dtype),
            "head.w": _he(rng, (cfg.num_classes, cfg.k2, 1, 1), dtype),
            "head.b": np.zeros(cfg.num_classes, dtype=dtype),
        }
        # SAN parameters are drawn even when unused so every switch setting
        # shares the same backbone initialisation for a given seed
        for stage, k in (("san1", cfg.k1), ("san2", cfg.k2)):
            st = SanState.init(cfg.C, k, rng, dtype)
            if cfg.san != "off":
                p.update({f"{stage}.{n}": v for n, v in st.params().items()})
        if category_map is None:
            category_map = default_category_map(cfg.num_classes, cfg.C)
        return cls(cfg, p, np.asarray(category_map, dtype=np.int64))

    def san_state(self, stage: str) -> SanState:
        return SanState(**{n: self.params[f"{stage}.{n}"] for n in ("gamma", "beta", "cls_w", "cls_b", "cfr_w", "cfr_b")})

    def astype(self, dtype) -> "ToyNet":
        return ToyNet(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()}, self.category_map.copy())

    def copy(self) -> "ToyNet":
        return self.astype(next(iter(self.params.values())).dtype)


def default_category_map(num_classes: int, C: int, class_freq=None) -> np.ndarray:
    """Map the C most frequent classes to categories 0..C-1, the rest to C.

    Without frequencies the first C class ids are kept.
    """
    order = np.arange(num_classes) if class_freq is None else np.argsort(-np.asarray(class_freq), kind="stable")
    cmap = np.full(num_classes, C, dtype=np.int64)
    for rank, cls_id in enumerate(order[:C]):
        cmap[cls_id] = rank
    return cmap


@dataclass
class ForwardResult:
    logits: np.ndarray
    taps: dict[str, np.ndarray]            # stage outputs before / after SAN
    caches: dict = field(default_factory=dict)
    aux_logits: dict = field(default_factory=dict)


def forward(net: ToyNet, images: np.ndarray, mode: str = "infer", pins=None) -> ForwardResult:
    """Run the network. ``mode="train"`` keeps the caches the backward pass
    needs; SAN transforms run in both modes. ``pins`` (see :func:`make_pins`)
    freezes SAN partitions for gradient checks."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg, p = net.cfg, net.params
    train = mode == "train"
    res = ForwardResult(None, {})
    x = images
    for stage, conv in (("san1", "conv1"), ("san2", "conv2")):
        a, conv_cache = layers.conv2d(x, p[f"{conv}.w"], p[f"{conv}.b"])
        h = np.maximum(a, 0)
        res.taps[f"{stage}.in"] = h
        if cfg.san == "on":
            st = net.san_state(stage)
            pinned = None if pins is None else pins[stage]["regions"]
            x, logits_s, san_cache = san_forward(h, st, cfg.region, cfg.eps, cfg.cfr, pinned)
            res.aux_logits[stage] = logits_s
            if train:
                res.caches[stage] = san_cache
        else:
            x = h
            if cfg.san == "aux" and train:
                res.aux_logits[stage], res.caches[stage] = layers.conv2d(
                    h, p[f"{stage}.cls_w"], p[f"{stage}.cls_b"]
                )
        res.taps[f"{stage}.out"] = x
        if train:
            res.caches[conv] = (conv_cache, a)
    logits, head_cache = layers.conv2d(x, p["head.w"], p["head.b"])
    res.logits = logits
    if train:
        res.caches["head"] = head_cache
    return res


def predict(net: ToyNet, images: np.ndarray, batch: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        out.append(forward(net, images[i:i + batch], "infer").logits.argmax(axis=1))
    return np.concatenate(out)


def _whitening(cfg: NetConfig, f: np.ndarray, cls_w):
    if cfg.whiten == "iw":
        loss, g = iw_loss(f)
        return loss, g, None
    if cfg.whiten == "giw":
        loss, g = giw_loss(f, f.shape[1] // cfg.C)
        return loss, g, None
    if cfg.whiten == "saw":
        return saw_loss(f, cls_w[: cfg.C, :, 0, 0])
    return 0.0, None, None


def make_pins(net: ToyNet, images: np.ndarray, labels: np.ndarray) -> dict:
    """SAN partitions and objective features at the current point.

    Both are constants of the backward pass; finite-difference checks pass
    them back in so the perturbed losses see the same constants.
    """
    if net.cfg.san != "on":
        return {}
    res = forward(net, images, "train")
    cat_labels = net.category_map[labels]
    pins = {}
    for stage in ("san1", "san2"):
        st = net.san_state(stage)
        pins[stage] = {
            "regions": res.caches[stage].regions,
            "f_obj": objective_features(res.taps[f"{stage}.in"], cat_labels, st.gamma, st.beta, net.cfg.eps),
        }
    return pins


def loss_and_grads(net: ToyNet, images: np.ndarray, labels: np.ndarray, pins=None):
    """Total training loss and gradients for every parameter.

    total = CE(head) + lambda_san * sum_stages L_SAN + lambda_saw * sum_stages L_white

    The objective features inside L_SAN are a fixed target (no gradient).
    """
    cfg, p = net.cfg, net.params
    res = forward(net, images, "train", pins)
    ce, g_x, _ = layers.cross_entropy(res.logits, labels)
    parts = {"ce": ce, "san": 0.0, "white": 0.0}
    grads: dict[str, np.ndarray] = {}
    cat_labels = net.category_map[labels]

    g_x, grads["head.w"], grads["head.b"] = layers.conv2d_backward(g_x, res.caches["head"])
    for stage, conv in (("san2", "conv2"), ("san1", "conv1")):
        h, f_out = res.taps[f"{stage}.in"], res.taps[f"{stage}.out"]
        cls_w = p.get(f"{stage}.cls_w")
        if cfg.whiten != "none" and cfg.lambda_saw != 0:
            wl, g_w, g_clsw = _whitening(cfg, f_out, cls_w)
            parts["white"] += wl
            g_x = g_x + cfg.lambda_saw * g_w
        else:
            g_clsw = None

        if cfg.san == "on":
            st = net.san_state(stage)
            g_logits_s = None
            if cfg.lambda_san != 0:
                if pins:
                    f_obj = pins[stage]["f_obj"]
                else:
                    f_obj = objective_features(h, cat_labels, st.gamma, st.beta, cfg.eps)
                sl, g_ft, g_logits_s, _ = san_loss(f_out, f_obj, res.aux_logits[stage], cat_labels)
                parts["san"] += sl
                g_x = g_x + cfg.lambda_san * g_ft
                g_logits_s = cfg.lambda_san * g_logits_s
            g_x, sg = san_backward(g_x, g_logits_s, st, res.caches[stage])
            for n, v in sg.items():
                grads[f"{stage}.{n}"] = v
        elif cfg.san == "aux":
            # classifier only: trained by its mask CE, features pass unchanged
            aux_ce, g_aux, _ = layers.cross_entropy(res.aux_logits[stage], cat_labels)
            parts["san"] += aux_ce
            g_h, gw, gb = layers.conv2d_backward(cfg.lambda_san * g_aux, res.caches[stage])
            g_x = g_x + g_h
            grads[f"{stage}.cls_w"], grads[f"{stage}.cls_b"] = gw, gb
            for n in ("gamma", "beta", "cfr_w", "cfr_b"):
                grads[f"{stage}.{n}"] = np.zeros_like(p[f"{stage}.{n}"])
        if g_clsw is not None:
            grads[f"{stage}.cls_w"][: cfg.C, :, 0, 0] += cfg.lambda_saw * g_clsw

        conv_cache, a = res.caches[conv]
        g_a = g_x * (a > 0)
        g_x, grads[f"{conv}.w"], grads[f"{conv}.b"] = layers.conv2d_backward(
            g_a, conv_cache, need_input=(conv != "conv1")
        )

    total = ce + cfg.lambda_san * parts["san"] + cfg.lambda_saw * parts["white"]
    parts["total"] = total
    return total, grads, parts


def poly_lr(lr0: float, it: int, iters: int, power: float = 0.9) -> float:
    return lr0 * max(0.0, 1.0 - it / iters) ** power


def sgd_step(params, grads, velocity, cfg: TrainConfig, it: int) -> float:
    """Momentum SGD, weight decay folded into the velocity. Updates in place."""
    lr = poly_lr(cfg.lr0, it, cfg.iters, cfg.poly_power)
    for name, theta in params.items():
        g = grads.get(name)
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(theta)
        v *= cfg.momentum
        if g is not None:
            v += g
        v += cfg.weight_decay * theta
        theta -= (lr * v).astype(theta.dtype)
    return lr


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    net: ToyNet
    losses: list[dict[str, float]]
    step_seconds: list[float]

    def trace(self, key: str = "ce") -> np.ndarray:
        return np.array([row[key] for row in self.losses])


def train(
    net: ToyNet,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    hook: Callable[[int, ToyNet], None] | None = None,
    hook_every: int = 0,
) -> TrainResult:
    """Train in place with shuffled mini-batches drawn from ``cfg.seed``."""
    if len(images) == 0:
        raise ValueError("empty training set")
    rng = make_rng(cfg.seed + 1)
    velocity: dict[str, np.ndarray] = {}
    losses, timings = [], []
    order = rng.permutation(len(images))
    cursor = 0
    for it in range(cfg.iters):
        if cursor + cfg.batch > len(order):
            order = rng.permutation(len(images))
            cursor = 0
        idx = order[cursor:cursor + cfg.batch] if len(images) >= cfg.batch else np.resize(order, cfg.batch)
        cursor += cfg.batch
        t0 = time.perf_counter()
        total, grads, parts = loss_and_grads(net, images[idx], labels[idx])
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {it}: {parts}")
        parts["lr"] = sgd_step(net.params, grads, velocity, cfg, it)
        timings.append(time.perf_counter() - t0)
        losses.append({k: float(v) for k, v in parts.items()})
        if hook is not None and hook_every and (it + 1) % hook_every == 0:
            hook(it + 1, net)
    return TrainResult(net, losses, timings)


def net_config_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)
