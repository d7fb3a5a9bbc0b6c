"""Command-line entry point: ``sansaw <command> [--config FILE] [flags]``.

Every run-config key is also a flag (``--lr0 0.01``, ``--lambda-saw 0.1``,
``--saw off``); flags beat the config file, which beats the defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import experiment as ex
from .config import ConfigError, RunConfig, parse_config
from .domains import load_benchmark, save_benchmark
from .evaluation import alignment_report, metric_rows, miou, write_metrics_csv
from .gradsuite import run_suite
from .io import save_tensor
from .saw import select_channel_indexes
from .toynet import forward

log = logging.getLogger("sansaw")


def _config_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=argparse.SUPPRESS,
                       metavar=f.type.upper(), help=f"override {f.name} (default {f.default})")
    return p


def build_parser() -> argparse.ArgumentParser:
    flags = _config_flags()
    parser = argparse.ArgumentParser(prog="sansaw", description=__doc__.splitlines()[0], parents=[flags])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[flags], help="write a synthetic benchmark bundle to --out")
    sub.add_parser("train", parents=[flags], help="train on --data, write checkpoint and record to --out")

    p = sub.add_parser("eval", parents=[flags], help="per-domain metrics CSV for a trained run")
    p.add_argument("--run", help="run directory (default: --out)")
    p.add_argument("--stub", choices=["identity"], help="score a stub predictor instead of a checkpoint")

    p = sub.add_parser("ablate", parents=[flags], help="module or grouping ablation over several seeds")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    p.add_argument("--study", choices=sorted(ex.STUDIES), default="modules")
    p.add_argument("--no-check", action="store_true", help="report only; exit 0 even if targets are missed")

    p = sub.add_parser("diagnose", parents=[flags], help="dump stage features and the alignment report")
    p.add_argument("--run", help="run directory (default: --out)")
    p.add_argument("--limit", type=int, default=8, help="images per domain")

    p = sub.add_parser("gradcheck", parents=[flags], help="finite-difference suite over every operator")
    p.add_argument("--instances", type=int, default=3)
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return parse_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    bench = ex.benchmark_for(cfg)
    root = save_benchmark(bench, cfg.out)
    print(f"wrote {len(bench.train.images)} train images and {len(bench.tests)} test domains to {root}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    bench = ex.load_data(cfg)
    net, record = ex.run_one(cfg, bench)
    out = ex.save_run(cfg.out, net, record)
    for d, v in record.miou.items():
        print(f"{d:>8s}  mIoU {v:6.2f}")
    print(f"step {record.timing['step_seconds'] * 1000:.1f} ms, inference {record.timing['infer_ms']:.1f} ms; wrote {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(args.run or cfg.out)
    bench = load_benchmark(cfg.data)
    rows = []
    if args.stub == "identity":
        run_id = "identity"
        for d, split in bench.tests.items():
            iou, mean = miou(split.labels, split.labels, bench.num_classes)
            rows += metric_rows(run_id, d, iou * 100, mean * 100)
    else:
        net, _ = ex.load_run(out)
        run_id = out.name
        report, _ = ex.alignment_summary(net, bench)
        for d, split in bench.tests.items():
            iou, mean = miou(ex.predict(net, split.images), split.labels, bench.num_classes)
            rows += metric_rows(run_id, d, iou * 100, mean * 100, report.mean_center_dist(), report.offdiag[d])
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    for r in rows:
        if r["class_id"] == -1:
            print(f"{r['domain']:>8s}  mIoU {float(r['miou']):6.2f}")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    rows = ex.STUDIES[args.study]
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    res = ex.run_ablation(cfg, rows, seeds)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, records in res.rows.items():
        for rec in records:
            rec.save(out / f"{args.study}_{name}_seed{rec.config['seed']}.json")
    (out / f"{args.study}_table.json").write_text(json.dumps(res.table(), indent=1))
    print(res.format_table())
    checks = ex.STUDY_CHECKS[args.study](res)
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    if args.no_check:
        return 0
    return 0 if all(c.passed for c in checks) else 1


def cmd_diagnose(cfg: RunConfig, args) -> int:
    out = Path(args.run or cfg.out)
    net, _ = ex.load_run(out)
    bench = load_benchmark(cfg.data)
    taps_dir = out / "taps"
    taps_dir.mkdir(parents=True, exist_ok=True)
    feats, labels = {}, {}
    for d, split in bench.tests.items():
        res = forward(net, split.images[: args.limit])
        for tap, t in res.taps.items():
            save_tensor(taps_dir / f"{d}_{tap}.sawt", t)
        feats[d] = res.taps[ex.ALIGN_STAGE]
        labels[d] = split.labels[: args.limit]
    idx = None
    if net.cfg.san != "off":
        idx = select_channel_indexes(net.params["san2.cls_w"][: net.cfg.C, :, 0, 0])
    report = alignment_report(feats, labels, idx)
    payload = {
        "stage": ex.ALIGN_STAGE,
        "center_dist": {str(k): v for k, v in report.center_dist.items()},
        "mean_center_dist": report.mean_center_dist(),
        "offdiag": report.offdiag,
        "grouped_offdiag": report.grouped_offdiag,
        "stats": {d: {str(c): list(ms) for c, ms in t.items()} for d, t in report.stats.items()},
    }
    (out / "alignment.json").write_text(json.dumps(payload, indent=1))
    print(f"mean center distance {report.mean_center_dist():.4f}")
    for d, v in report.offdiag.items():
        print(f"{d:>8s}  offdiag {v:.4f}")
    print(f"wrote {taps_dir} and {out / 'alignment.json'}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_suite(seed=cfg.seed, instances=args.instances)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name:24s} max rel err {r.worst:.2e}")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except (FileNotFoundError, ValueError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
