"""Run configuration and run records.

A run config is a flat JSON object. Missing keys take the defaults below,
unknown keys are rejected, and command-line flags override file values.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .toynet import NetConfig, TrainConfig

SWITCH = {"on": True, "off": False, True: True, False: False}
GROUPINGS = ("iw", "giw", "saw")


class ConfigError(ValueError):
    """A config key is unknown, malformed or violates a constraint."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # model switches; san "aux" trains the mask classifier only and leaves
    # features untouched, which is how SAW runs without SAN
    san: str = "on"
    saw: str = "on"
    cfr: str = "on"
    grouping: str = "saw"
    C: int = 4
    k: int = 5
    t: int = 1
    eps: float = 1e-5
    # optimisation
    lr0: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 2
    poly_power: float = 0.9
    iters: int = 2000
    lambda_san: float = 1.0
    lambda_saw: float = 1.0
    # network and data
    num_classes: int = 4
    k1: int = 16
    k2: int = 16
    image_size: int = 64
    n_train: int = 200
    n_test: int = 50
    data: str = "data"
    out: str = "runs"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name}: expected an integer, got {v!r}")
            if f.type == "float" and (isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v)):
                raise ConfigError(f"{f.name}: expected a finite number, got {v!r}")
        if self.san not in ("on", "off", "aux"):
            raise ConfigError(f"san: expected on, off or aux, got {self.san!r}")
        for key in ("saw", "cfr"):
            if getattr(self, key) not in ("on", "off"):
                raise ConfigError(f"{key}: expected on or off, got {getattr(self, key)!r}")
        if self.grouping not in GROUPINGS:
            raise ConfigError(f"grouping: expected one of {GROUPINGS}, got {self.grouping!r}")
        if self.saw == "on" and self.grouping == "saw" and self.san == "off":
            raise ConfigError("saw: grouping 'saw' needs the SAN classifier, set san to on or aux")
        for key in ("k1", "k2"):
            if getattr(self, key) % self.C:
                raise ConfigError(f"C: {self.C} does not divide {key}={getattr(self, key)}")
        if not 1 <= self.C <= self.num_classes:
            raise ConfigError(f"C: must lie in 1..num_classes={self.num_classes}, got {self.C}")
        if not 1 <= self.t < self.k:
            raise ConfigError(f"t: need 1 <= t < k, got t={self.t}, k={self.k}")
        if self.eps <= 0:
            raise ConfigError(f"eps: must be positive, got {self.eps}")
        for key in ("iters", "batch", "n_train", "n_test"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.image_size < 32:
            raise ConfigError("image_size: scenes need at least 32 pixels a side")
        if self.seed < 0:
            raise ConfigError("seed: must be non-negative")

    @property
    def whiten(self) -> str:
        return self.grouping if self.saw == "on" else "none"

    def net_config(self) -> NetConfig:
        return NetConfig(
            num_classes=self.num_classes, k1=self.k1, k2=self.k2, C=self.C, san=self.san,
            cfr=self.cfr == "on", whiten=self.whiten, k=self.k, t=self.t, eps=self.eps,
            lambda_san=self.lambda_san, lambda_saw=self.lambda_saw,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0, momentum=self.momentum, weight_decay=self.weight_decay, batch=self.batch,
            poly_power=self.poly_power, iters=self.iters, seed=self.seed,
        )

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **{k: _coerce(k, v) for k, v in changes.items()})

    def to_json(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    """Normalise one raw value (JSON or command-line string) for ``key``."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    if key in ("saw", "cfr", "san") and isinstance(value, bool):
        return "on" if value else "off"
    if not isinstance(value, str) or kind == "str":
        return value
    try:
        return int(value) if kind == "int" else float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    merged = {**raw, **(overrides or {})}
    return RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})


# ---------------------------------------------------------------- records

@dataclass
class RunRecord:
    config: dict
    losses: list[dict] = field(default_factory=list)
    miou: dict[str, float] = field(default_factory=dict)
    per_class: dict[str, list] = field(default_factory=dict)   # None for classes absent in a domain
    timing: dict[str, float] = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)

    TIMING_KEYS = ("step_seconds", "infer_ms")

    def without_timing(self) -> "RunRecord":
        return replace(self, timing={})

    def target_miou(self, source: str = "source") -> float:
        vals = [v for d, v in self.miou.items() if d != source]
        return sum(vals) / len(vals)

    def to_json(self) -> dict:
        return {
            "config": self.config, "losses": self.losses, "miou": self.miou,
            "per_class": self.per_class, "timing": self.timing, "alignment": self.alignment,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(d["config"], d["losses"], d["miou"], d["per_class"], d["timing"], d["alignment"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, allow_nan=False))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(json.loads(Path(path).read_text()))
