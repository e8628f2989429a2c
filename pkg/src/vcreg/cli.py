"""Command-line driver: ``vcreg {train,probe,bench,sweep,boundary}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bench, config, metrics, train
from .config import BenchConfig, ConfigError, ExperimentConfig, SweepConfig
from .datasets import SchemaError
from .hooks import PlacementError
from .models import load_checkpoint, save_checkpoint
from .tensor import ShapeError

log = logging.getLogger("vcreg")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return cfg
    return cfg.model_copy(update={"seeds": [seed]})


def _out_dir(args, cfg: ExperimentConfig | None = None, fallback: str = "runs/default") -> Path:
    out = Path(args.out if args.out is not None else (cfg.outputs if cfg is not None else fallback))
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_to_dir(cfg: ExperimentConfig, out: Path) -> list[dict]:
    """Train every seed of ``cfg`` and write config, reports and checkpoints."""
    out.mkdir(parents=True, exist_ok=True)
    train.write_text_atomic(out / "resolved_config.yaml", config.dump(cfg))
    reports = []
    for seed in cfg.seeds:
        result = train.run(cfg, seed)
        train.write_json_atomic(out / f"report_seed{seed}.json", result.report)
        save_checkpoint(result.model, out / f"checkpoint_seed{seed}")
        f = result.report["final"]
        log.info("seed %d: train %.4f val %s test %s", seed, f["train_accuracy"],
                 _fmt(f["val_accuracy"]), _fmt(f["test_accuracy"]))
        reports.append(result.report)
    return reports


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _with_seed(config.load(args.config), args.seed)
    train_to_dir(cfg, _out_dir(args, cfg))
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _with_seed(config.load(args.config), args.seed)
    out = _out_dir(args, cfg)
    seed = cfg.seeds[0]
    splits = train.make_splits(cfg, seed)
    if args.level == "sub_label":
        if splits.full.super_labels is None or cfg.dataset.target != "super_label":
            raise ConfigError("level: sub_label needs a dataset with super_labels trained on target super_label")
        level = "label"
    else:
        level = cfg.dataset.target
    model = load_checkpoint(args.checkpoint)
    try:
        model.features(splits.full.inputs[:2])
    except ShapeError as exc:
        raise SchemaError(f"checkpoint does not match the dataset's input shape: {exc}") from None
    held = splits.test if len(splits.test) else splits.train
    res = metrics.linear_probe(model.features(splits.train.inputs), splits.train.target(level),
                               cfg.evaluation.probe_l2,
                               held_out=(model.features(held.inputs), held.target(level)))
    payload = {"schema_version": train.SCHEMA_VERSION, "checkpoint": str(args.checkpoint),
               "seed": seed, "level": args.level, "accuracy": res.accuracy, "l2": res.l2,
               "by_l2": {repr(k): v for k, v in res.accuracies.items()}}
    train.write_text_atomic(out / "resolved_config.yaml", config.dump(cfg))
    train.write_json_atomic(out / f"probe_{args.level}.json", payload)
    log.info("probe %s: accuracy %.4f (l2=%g)", args.level, res.accuracy, res.l2)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = config.load(args.config, BenchConfig)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    out = _out_dir(args, fallback="runs/bench")
    fields = cfg.model_dump()
    variants = fields.pop("variants")
    scenario = bench.BenchScenario(variant=variants[0], **fields)
    results = bench.run_suite(scenario, variants)
    train.write_text_atomic(out / "resolved_config.yaml", config.dump(cfg))
    for name, r in results.items():
        payload = r.to_json()
        bench.validate(payload)
        train.write_json_atomic(out / f"bench_{name}.json", payload)
        log.info("%-8s mean %.3f ms (fwd %.3f, bwd %.3f)", name, r.mean_ns / 1e6,
                 np.mean(r.forward_ns) / 1e6, np.mean(r.backward_ns) / 1e6)
    train.write_json_atomic(out / "bench_summary.json", bench.ratios(results))
    return EXIT_OK


def _cell_name(alpha: float, beta: float) -> str:
    return f"alpha{alpha!r}_beta{beta!r}"


def _run_cell(cfg_data: dict, alpha: float, beta: float, out: str) -> dict:
    cfg = config.parse(cfg_data)
    cfg = cfg.model_copy(update={"vcreg": cfg.vcreg.model_copy(update={"alpha": alpha, "beta": beta})})
    reports = train_to_dir(cfg, Path(out))

    def mean_of(key):
        vals = [r["final"][key] for r in reports]
        return None if any(v is None for v in vals) else float(np.mean(vals))

    return {"alpha": alpha, "beta": beta, "val_accuracy": mean_of("val_accuracy"),
            "test_accuracy": mean_of("test_accuracy"), "train_accuracy": mean_of("train_accuracy"),
            "seeds": len(reports), "dir": out}


SUMMARY_FIELDS = ["rank", "alpha", "beta", "val_accuracy", "test_accuracy", "train_accuracy", "seeds", "dir"]


def summary_csv(rows: list[dict]) -> str:
    """Completed cells ranked by validation accuracy, best first."""
    ranked = sorted(rows, key=lambda r: (r["val_accuracy"] is None, -(r["val_accuracy"] or 0.0),
                                         -r["alpha"], -r["beta"]))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for i, r in enumerate(ranked, start=1):
        w.writerow({**r, "rank": i})
    return buf.getvalue()


def cmd_sweep(args) -> int:
    sweep = config.load(args.config, SweepConfig)
    base = _with_seed(sweep.base, args.seed)
    out = _out_dir(args, base)
    train.write_text_atomic(out / "resolved_config.yaml",
                            config.dump(sweep.model_copy(update={"base": base})))
    cells = [(a, b) for a in sweep.alphas for b in sweep.betas]
    data = base.model_dump(mode="json")
    jobs = [(data, a, b, str(out / _cell_name(a, b))) for a, b in cells]
    workers = args.workers or sweep.workers
    rows, failures = [], []

    def collect(job, fn):
        try:
            rows.append(fn())
            log.info("cell alpha=%g beta=%g done", job[1], job[2])
        except Exception as exc:  # a failed cell must not stop the sweep
            log.error("cell alpha=%g beta=%g failed: %s", job[1], job[2], exc)
            failures.append({"alpha": job[1], "beta": job[2], "error": f"{type(exc).__name__}: {exc}"})

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job, pool.submit(_run_cell, *job)) for job in jobs]
            for job, fut in futures:
                collect(job, fut.result)
    else:
        for job in jobs:
            collect(job, lambda job=job: _run_cell(*job))

    train.write_text_atomic(out / "summary.csv", summary_csv(rows))
    train.write_json_atomic(out / "failures.json", failures)
    log.info("sweep: %d/%d cells completed", len(rows), len(cells))
    return EXIT_OK if rows else EXIT_RUNTIME


def cmd_boundary(args) -> int:
    cfg = _with_seed(config.load(args.config), args.seed)
    out = _out_dir(args, cfg)
    seed = cfg.seeds[0]
    splits = train.make_splits(cfg, seed)
    if splits.full.inputs.ndim != 2 or splits.full.inputs.shape[1] != 2:
        raise ConfigError(f"dataset: boundary grids need 2-D inputs, got {splits.full.inputs.shape[1:]}")
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
    else:
        model = train.run(cfg, seed).model
    grid = train.boundary_grid(cfg, model, splits)
    train.write_text_atomic(out / "resolved_config.yaml", config.dump(cfg))
    path = out / f"boundary_seed{seed}.csv"
    tmp = path.with_suffix(".csv.tmp")
    grid.to_csv(tmp)
    tmp.replace(path)
    log.info("wrote %s (%d cells)", path, grid.pred.size)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcreg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="YAML config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config's seeds")
        sp.add_argument("--out", default=None, help="output directory")
        return sp

    common(sub.add_parser("train", help="train and write report JSON + checkpoint")).set_defaults(fn=cmd_train)
    sp = common(sub.add_parser("probe", help="linear probe on a checkpoint's penultimate features"))
    sp.add_argument("--checkpoint", required=True, help="checkpoint path (without or with .json/.bin)")
    sp.add_argument("--level", choices=["label", "sub_label"], default="label")
    sp.set_defaults(fn=cmd_probe)
    common(sub.add_parser("bench", help="latency of identity/naive/fast/bn_like")).set_defaults(fn=cmd_bench)
    sp = common(sub.add_parser("sweep", help="alpha x beta grid of training runs"))
    sp.add_argument("--workers", type=int, default=None, help="parallel worker processes")
    sp.set_defaults(fn=cmd_sweep)
    sp = common(sub.add_parser("boundary", help="decision-boundary grid CSV for 2-D data"))
    sp.add_argument("--checkpoint", default=None, help="use a trained checkpoint instead of training")
    sp.set_defaults(fn=cmd_boundary)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (ConfigError, PlacementError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (train.TrainingDiverged, bench.BenchError, SchemaError, OSError, ValueError,
            FloatingPointError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
