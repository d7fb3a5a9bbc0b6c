"""Training runs, evaluation and the ablation studies behind the CLI."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, RunRecord
from .domains import Benchmark, gen_benchmark, load_benchmark
from .evaluation import alignment_report, miou
from .io import load_checkpoint, save_checkpoint
from .saw import select_channel_indexes
from .toynet import ToyNet, default_category_map, forward, predict, train

log = logging.getLogger(__name__)

# module ablation rows: switches applied on top of the run config
ABLATION_ROWS = {
    "baseline": {"san": "off", "saw": "off"},
    "san": {"san": "on", "saw": "off"},
    "saw": {"san": "aux", "saw": "on", "grouping": "saw"},
    "full": {"san": "on", "saw": "on", "grouping": "saw"},
}
# whitening variants with SAN off (SAW still needs the mask classifier)
GROUPING_ROWS = {
    "iw": {"san": "off", "saw": "on", "grouping": "iw"},
    "giw": {"san": "off", "saw": "on", "grouping": "giw"},
    "saw": {"san": "aux", "saw": "on", "grouping": "saw"},
}
STUDIES = {"modules": ABLATION_ROWS, "grouping": GROUPING_ROWS}

TIMING_WINDOW = (100, 200)
ALIGN_STAGE = "san2.out"


def benchmark_for(cfg: RunConfig) -> Benchmark:
    return gen_benchmark(cfg.seed, cfg.n_train, cfg.n_test, h=cfg.image_size, w=cfg.image_size,
                         num_classes=cfg.num_classes)


def load_data(cfg: RunConfig) -> Benchmark:
    bench = load_benchmark(cfg.data)
    if bench.num_classes != cfg.num_classes:
        raise ValueError(f"{cfg.data}: bundle has {bench.num_classes} classes, config expects {cfg.num_classes}")
    return bench


def build_net(cfg: RunConfig, bench: Benchmark) -> ToyNet:
    cmap = default_category_map(cfg.num_classes, cfg.C, bench.class_frequencies())
    return ToyNet.init(cfg.net_config(), cfg.seed, cmap)


def mean_step_seconds(step_seconds) -> float:
    lo, hi = TIMING_WINDOW
    window = step_seconds[lo:hi] if len(step_seconds) > lo else step_seconds
    return float(np.mean(window))


def inference_ms(net: ToyNet, images: np.ndarray, batch: int = 2, repeats: int = 20) -> float:
    """Mean milliseconds per forward pass on a fixed batch."""
    x = images[:batch]
    forward(net, x)
    t0 = time.perf_counter()
    for _ in range(repeats):
        forward(net, x)
    return (time.perf_counter() - t0) * 1000.0 / repeats


def evaluate(net: ToyNet, bench: Benchmark) -> tuple[dict, dict]:
    """Per-domain mean IoU (percent) and per-class IoU lists."""
    means, per_class = {}, {}
    for name, split in bench.tests.items():
        iou, mean = miou(predict(net, split.images), split.labels, net.cfg.num_classes)
        means[name] = mean * 100.0
        per_class[name] = [None if np.isnan(v) else float(v) * 100.0 for v in iou]
    return means, per_class


def stage_features(net: ToyNet, images: np.ndarray, tap: str = ALIGN_STAGE, batch: int = 8) -> np.ndarray:
    return np.concatenate([forward(net, images[i:i + batch]).taps[tap] for i in range(0, len(images), batch)])


def alignment_summary(net: ToyNet, bench: Benchmark, limit: int = 16):
    """Category-center distances and covariance off-diagonals at the last stage."""
    feats, labels = {}, {}
    for name, split in bench.tests.items():
        feats[name] = stage_features(net, split.images[:limit])
        labels[name] = split.labels[:limit]
    idx = None
    if net.cfg.san != "off":
        idx = select_channel_indexes(net.params["san2.cls_w"][: net.cfg.C, :, 0, 0])
    report = alignment_report(feats, labels, idx)
    summary = {
        "center_dist": report.mean_center_dist(),
        "center_dist_by_class": {str(c): v for c, v in report.center_dist.items()},
        "offdiag": report.offdiag,
    }
    if report.grouped_offdiag:
        summary["grouped_offdiag"] = report.grouped_offdiag
    return report, summary


def run_one(cfg: RunConfig, bench: Benchmark, timing: bool = True) -> tuple[ToyNet, RunRecord]:
    """Train ``cfg`` on ``bench`` and evaluate every test domain."""
    net = build_net(cfg, bench)
    t0 = time.perf_counter()
    result = train(net, bench.train.images, bench.train.labels, cfg.train_config())
    log.info("trained %s/%s/%s seed %d in %.1fs", cfg.san, cfg.saw, cfg.grouping, cfg.seed, time.perf_counter() - t0)
    means, per_class = evaluate(net, bench)
    _, align = alignment_summary(net, bench)
    record = RunRecord(cfg.to_json(), result.losses, means, per_class, {}, align)
    if timing:
        record.timing = {
            "step_seconds": mean_step_seconds(result.step_seconds),
            "infer_ms": inference_ms(net, bench.tests["source"].images),
        }
    return net, record


def save_run(out, net: ToyNet, record: RunRecord) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tensors = dict(net.params)
    tensors["meta.category_map"] = net.category_map.astype(np.float32)
    save_checkpoint(out / "checkpoint.sawm", tensors)
    record.save(out / "run.json")
    return out


def load_run(out) -> tuple[ToyNet, RunRecord]:
    out = Path(out)
    for name in ("checkpoint.sawm", "run.json"):
        if not (out / name).exists():
            raise FileNotFoundError(f"{out / name} not found; run train first")
    record = RunRecord.load(out / "run.json")
    cfg = RunConfig(**record.config)
    tensors = load_checkpoint(out / "checkpoint.sawm")
    cmap = tensors.pop("meta.category_map").astype(np.int64)
    net = ToyNet(cfg.net_config(), tensors, cmap)
    expected = set(ToyNet.init(cfg.net_config(), 0, cmap).params)
    if set(tensors) != expected:
        raise ValueError(f"{out / 'checkpoint.sawm'}: parameters {sorted(set(tensors) ^ expected)} do not match the config")
    return net, record


@dataclass
class AblationResult:
    rows: dict[str, list[RunRecord]]      # row name -> one record per seed

    def mean_miou(self, row: str, domain: str) -> float:
        return float(np.mean([r.miou[domain] for r in self.rows[row]]))

    def mean_target(self, row: str) -> float:
        return float(np.mean([r.target_miou() for r in self.rows[row]]))

    def mean_timing(self, row: str, key: str) -> float:
        return float(np.mean([r.timing[key] for r in self.rows[row]]))

    @property
    def domains(self) -> list[str]:
        first = next(iter(self.rows.values()))[0]
        return list(first.miou)

    def table(self) -> list[dict]:
        out = []
        for row in self.rows:
            entry = {"row": row}
            entry.update({d: round(self.mean_miou(row, d), 2) for d in self.domains})
            entry["target_mean"] = round(self.mean_target(row), 2)
            out.append(entry)
        return out

    def format_table(self) -> str:
        cols = ["row", *self.domains, "target_mean"]
        lines = [" ".join(f"{c:>12s}" for c in cols)]
        for entry in self.table():
            lines.append(" ".join(f"{entry[c]:>12}" if c == "row" else f"{entry[c]:>12.2f}" for c in cols))
        return "\n".join(lines)


def run_ablation(base: RunConfig, rows: dict[str, dict], seeds, bench_for_seed=None) -> AblationResult:
    """Every row at every seed. Each seed gets its own benchmark draw unless
    ``bench_for_seed`` supplies one."""
    results: dict[str, list[RunRecord]] = {name: [] for name in rows}
    for seed in seeds:
        seeded = base.with_(seed=seed)
        bench = bench_for_seed(seed) if bench_for_seed else benchmark_for(seeded)
        for name, switches in rows.items():
            _, record = run_one(seeded.with_(**switches), bench)
            results[name].append(record)
    return AblationResult(results)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def check_modules(res: AblationResult) -> list[Check]:
    """Directional targets for the module ablation, in mIoU points."""
    t = {row: res.mean_target(row) for row in ABLATION_ROWS}
    base = t["baseline"]
    checks = [
        Check("full >= baseline + 3.0", t["full"] >= base + 3.0, f"{t['full']:.2f} vs {base:.2f}"),
        Check("san >= baseline + 1.5", t["san"] >= base + 1.5, f"{t['san']:.2f} vs {base:.2f}"),
        Check("saw >= baseline + 1.0", t["saw"] >= base + 1.0, f"{t['saw']:.2f} vs {base:.2f}"),
        Check("san >= saw - 0.5", t["san"] >= t["saw"] - 0.5, f"{t['san']:.2f} vs {t['saw']:.2f}"),
    ]
    src_full, src_base = res.mean_miou("full", "source"), res.mean_miou("baseline", "source")
    checks.append(Check("source(full) within 1.0 of baseline", abs(src_full - src_base) <= 1.0,
                        f"{src_full:.2f} vs {src_base:.2f}"))
    return checks


def check_grouping(res: AblationResult, tol: float = 0.5) -> list[Check]:
    t = {row: res.mean_target(row) for row in GROUPING_ROWS}
    return [
        Check("iw <= giw (+0.5)", t["iw"] <= t["giw"] + tol, f"{t['iw']:.2f} vs {t['giw']:.2f}"),
        Check("giw <= saw (+0.5)", t["giw"] <= t["saw"] + tol, f"{t['giw']:.2f} vs {t['saw']:.2f}"),
    ]


STUDY_CHECKS = {"modules": check_modules, "grouping": check_grouping}
