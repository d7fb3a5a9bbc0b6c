"""Procedural multi-domain segmentation benchmark.

Scenes are layered flat shapes (background, rectangle, disk, horizontal band
and, for more classes, extra shapes) with per-class base colors and light
texture. Domains differ only by a global photometric style::

    styled = clip(gain * x ** gamma + bias + noise, 0, 1)     per RGB channel

Each domain owns a box of style parameters; every image draws its own style
from its domain's box.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import load_tensor, save_tensor
from .tensor import make_rng

BASE_COLORS = np.array([
    [0.45, 0.50, 0.45],   # background
    [0.80, 0.25, 0.20],   # rectangle
    [0.20, 0.35, 0.80],   # disk
    [0.85, 0.80, 0.25],   # band
    [0.25, 0.70, 0.30],   # vertical band
    [0.70, 0.30, 0.75],   # square
    [0.20, 0.75, 0.75],   # diamond
    [0.55, 0.35, 0.15],   # small disk
], dtype=np.float64)

Interval = tuple[float, float]


@dataclass(frozen=True)
class DomainSpec:
    """A concrete style: one value per field (gains and biases per channel)."""

    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if min(self.gain) <= 0:
            raise ValueError("gains must be positive")
        if not 0.5 <= self.gamma <= 2.0:
            raise ValueError(f"gamma {self.gamma} outside [0.5, 2.0]")
        if not 0.0 <= self.noise_std <= 0.1:
            raise ValueError(f"noise_std {self.noise_std} outside [0, 0.1]")


@dataclass(frozen=True)
class DomainRange:
    """Box of styles a domain samples from."""

    name: str
    gain: tuple[Interval, Interval, Interval]
    bias: tuple[Interval, Interval, Interval]
    gamma: Interval
    noise_std: Interval

    def intervals(self) -> list[Interval]:
        return [*self.gain, *self.bias, self.gamma, self.noise_std]

    def overlaps(self, other: "DomainRange") -> bool:
        """Boxes intersect iff every field's intervals intersect."""
        return all(a[0] <= b[1] and b[0] <= a[1] for a, b in zip(self.intervals(), other.intervals()))

    def sample(self, rng: np.random.Generator) -> DomainSpec:
        u = lambda iv: float(rng.uniform(*iv))  # noqa: E731
        return DomainSpec(
            gain=tuple(u(iv) for iv in self.gain),
            bias=tuple(u(iv) for iv in self.bias),
            gamma=u(self.gamma),
            noise_std=u(self.noise_std),
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DomainRange":
        return cls(
            name=d["name"],
            gain=tuple(tuple(iv) for iv in d["gain"]),
            bias=tuple(tuple(iv) for iv in d["bias"]),
            gamma=tuple(d["gamma"]),
            noise_std=tuple(d["noise_std"]),
        )


def _same(iv: Interval) -> tuple[Interval, Interval, Interval]:
    return (iv, iv, iv)


SOURCE = DomainRange("source", _same((0.9, 1.1)), _same((-0.05, 0.05)), (0.9, 1.1), (0.0, 0.02))
TARGETS = (
    DomainRange("dim", _same((0.45, 0.65)), _same((0.0, 0.05)), (1.25, 1.5), (0.02, 0.05)),
    DomainRange("warm", ((1.15, 1.35), (0.85, 1.0), (0.5, 0.7)), ((0.05, 0.12), (0.0, 0.05), (-0.05, 0.0)),
                (0.7, 0.85), (0.0, 0.03)),
    DomainRange("foggy", _same((0.4, 0.55)), _same((0.35, 0.45)), (0.9, 1.1), (0.03, 0.06)),
)


# ---------------------------------------------------------------- scenes

def gen_scene(seed: int, h: int = 64, w: int = 64, num_classes: int = 4):
    """Base image (3,H,W) in [0,1] and exact labels (H,W) for one scene."""
    if not 2 <= num_classes <= 8:
        raise ValueError("num_classes must be in 2..8")
    if h < 32 or w < 32:
        raise ValueError("scenes need H, W >= 32")
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)

    def rect():
        rh, rw = rng.integers(h // 5, h // 2), rng.integers(w // 5, w // 2)
        y0, x0 = rng.integers(0, h - rh), rng.integers(0, w - rw)
        return (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)

    def disk(rmin=0.12, rmax=0.25):
        r = rng.uniform(rmin, rmax) * min(h, w)
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r

    def hband():
        bh = rng.integers(h // 10, h // 5)
        y0 = rng.integers(0, h - bh)
        return (yy >= y0) & (yy < y0 + bh)

    def vband():
        bw = rng.integers(w // 12, w // 6)
        x0 = rng.integers(0, w - bw)
        return (xx >= x0) & (xx < x0 + bw)

    def square():
        s = rng.integers(min(h, w) // 8, min(h, w) // 4)
        y0, x0 = rng.integers(0, h - s), rng.integers(0, w - s)
        return (yy >= y0) & (yy < y0 + s) & (xx >= x0) & (xx < x0 + s)

    def diamond():
        r = rng.uniform(0.08, 0.15) * min(h, w)
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        return np.abs(yy - cy) + np.abs(xx - cx) <= r

    shapes = [rect, lambda: disk(), hband, vband, square, diamond, lambda: disk(0.06, 0.1)]
    for cls_id in range(1, num_classes):
        labels[shapes[cls_id - 1]()] = cls_id

    # per-scene color jitter, then a per-class texture on top
    colors = np.clip(BASE_COLORS[:num_classes] + rng.uniform(-0.06, 0.06, size=(num_classes, 3)), 0, 1)
    img = colors[labels].transpose(2, 0, 1)
    freq = 0.3 + 0.25 * np.arange(num_classes)
    phase = rng.uniform(0, 2 * np.pi, size=num_classes)
    pattern = 0.04 * np.sin(freq[labels] * (xx + yy) + phase[labels])
    img = img + pattern[None] + rng.uniform(-0.03, 0.03, size=(3, h, w))
    return np.clip(img, 0, 1), labels


def apply_style(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    gain = np.asarray(spec.gain, dtype=np.float64)[:, None, None]
    bias = np.asarray(spec.bias, dtype=np.float64)[:, None, None]
    out = gain * image.astype(np.float64) ** spec.gamma + bias
    if spec.noise_std > 0:
        if rng is None:
            raise ValueError("a noisy style needs an rng")
        out = out + rng.normal(0.0, spec.noise_std, size=image.shape)
    return np.clip(out, 0, 1)


# ---------------------------------------------------------------- bundles

@dataclass
class Split:
    images: np.ndarray          # (N,3,H,W) float32
    labels: np.ndarray          # (N,H,W) int64
    scene_seeds: np.ndarray
    styles: list = field(default_factory=list)


@dataclass
class Benchmark:
    seed: int
    num_classes: int
    source: DomainRange
    targets: tuple[DomainRange, ...]
    train: Split
    tests: dict[str, Split]     # "source" plus one entry per target name

    @property
    def domain_names(self) -> list[str]:
        return list(self.tests)

    def class_frequencies(self) -> np.ndarray:
        return np.bincount(self.train.labels.ravel(), minlength=self.num_classes)


def _make_split(rng, scene_base: int, count: int, domain: DomainRange, h: int, w: int, num_classes: int) -> Split:
    scene_seeds = scene_base + np.arange(count)
    imgs = np.empty((count, 3, h, w), dtype=np.float32)
    labels = np.empty((count, h, w), dtype=np.int64)
    styles = []
    for i, s in enumerate(scene_seeds):
        base, lbl = gen_scene(int(s), h, w, num_classes)
        spec = domain.sample(rng)
        imgs[i] = apply_style(base, spec, rng)
        labels[i] = lbl
        styles.append(spec)
    return Split(imgs, labels, scene_seeds, styles)


def gen_benchmark(
    seed: int = 0,
    n_train: int = 200,
    n_test_per_domain: int = 50,
    source: DomainRange = SOURCE,
    targets=TARGETS,
    h: int = 64,
    w: int = 64,
    num_classes: int = 4,
) -> Benchmark:
    """Source train/test splits plus one held-out test split per target.

    Every split draws its own scene seeds, so no layout is shared between
    training and any test set.
    """
    names = [source.name] + [t.name for t in targets]
    if len(set(names)) != len(names) or "source" in [t.name for t in targets]:
        raise ValueError(f"domain names must be unique and targets cannot be called 'source': {names}")
    for t in targets:
        if t.overlaps(source):
            raise ValueError(f"target style range {t.name!r} overlaps the source range")
    rng = make_rng(seed)
    # disjoint blocks of scene seeds per split
    stride = 1 << 20
    base = int(seed) * 16 * stride
    train = _make_split(rng, base, n_train, source, h, w, num_classes)
    tests = {"source": _make_split(rng, base + stride, n_test_per_domain, source, h, w, num_classes)}
    for i, t in enumerate(targets):
        tests[t.name] = _make_split(rng, base + (i + 2) * stride, n_test_per_domain, t, h, w, num_classes)
    return Benchmark(int(seed), num_classes, source, tuple(targets), train, tests)


def save_benchmark(bench: Benchmark, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = {"train": bench.train, **{f"test-{k}": v for k, v in bench.tests.items()}}
    manifest = {
        "seed": bench.seed,
        "num_classes": bench.num_classes,
        "source": bench.source.to_json(),
        "targets": [t.to_json() for t in bench.targets],
        "counts": {k: len(v.images) for k, v in splits.items()},
        "scene_seeds": {k: v.scene_seeds.tolist() for k, v in splits.items()},
    }
    for name, split in splits.items():
        for i in range(len(split.images)):
            save_tensor(root / f"img_{name}_{i}.sawt", split.images[i])
            save_tensor(root / f"lbl_{name}_{i}.sawt", split.labels[i].astype(np.float32))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_benchmark(root) -> Benchmark:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found; run gen-data first")
    m = json.loads(manifest_path.read_text())

    def split(name):
        n = m["counts"][name]
        imgs = np.stack([load_tensor(root / f"img_{name}_{i}.sawt") for i in range(n)])
        lbls = np.stack([load_tensor(root / f"lbl_{name}_{i}.sawt") for i in range(n)]).astype(np.int64)
        return Split(imgs, lbls, np.asarray(m["scene_seeds"][name]))

    tests = {k[len("test-"):]: split(k) for k in m["counts"] if k.startswith("test-")}
    return Benchmark(
        m["seed"], m["num_classes"], DomainRange.from_json(m["source"]),
        tuple(DomainRange.from_json(t) for t in m["targets"]), split("train"), tests,
    )
