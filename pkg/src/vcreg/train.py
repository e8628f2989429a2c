"""Training runs and experiment reports."""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasets, metrics
from . import tensor as T
from .config import ConvModel, CsvData, ExperimentConfig, HierarchicalData, TwoMoonsData
from .datasets import LabeledSet
from .hooks import SiteDivergedError, VCRegModel, attach_vcreg_hooks
from .models import ConvBlock, ConvNetSpec, MlpSpec, Model, build_convnet, build_mlp

SCHEMA_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, site: str | None, cause: Exception):
        where = f"site {site!r}" if site else "supervised loss"
        super().__init__(f"non-finite values at epoch {epoch}, {where}: {cause}")
        self.epoch = epoch
        self.site = site


@dataclass
class Streams:
    """Independent per-purpose seeds derived from one run seed."""

    data: int
    split: int
    init: int
    shuffle: int

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        children = np.random.SeedSequence(seed).spawn(4)
        return cls(*(int(c.generate_state(1, dtype=np.uint64)[0] >> 1) for c in children))


@dataclass
class Splits:
    full: LabeledSet
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet


def make_dataset(cfg: ExperimentConfig, seed: int) -> LabeledSet:
    src = cfg.dataset.source
    data_seed = cfg.dataset.seed if cfg.dataset.seed is not None else Streams.from_seed(seed).data
    if isinstance(src, TwoMoonsData):
        return datasets.two_moons(src.n, src.gap, src.noise_sd, data_seed)
    if isinstance(src, HierarchicalData):
        return datasets.hierarchical_gaussians(
            src.n_super, src.subs_per_super, src.n_per_sub, src.d,
            src.super_spread, src.sub_spread, src.within_sd, data_seed)
    if isinstance(src, CsvData):
        data = datasets.load_csv(src.path, src.features, src.label, src.super_label)
        if src.image_shape is not None:
            c, h, w = src.image_shape
            if c * h * w != data.inputs.shape[1]:
                raise datasets.SchemaError(f"image_shape {src.image_shape} does not match "
                                           f"{data.inputs.shape[1]} feature columns")
            data = LabeledSet(data.inputs.reshape(-1, c, h, w), data.labels, data.super_labels)
        return data
    raise ValueError(f"unsupported dataset {src!r}")


def make_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    full = make_dataset(cfg, seed)
    target = full.target(cfg.dataset.target)
    tr, va, te = datasets.split(full, cfg.dataset.split, seed=Streams.from_seed(seed).split, stratify=target)
    return Splits(full, tr, va, te)


def make_model(cfg: ExperimentConfig, data: LabeledSet, seed: int) -> Model:
    n_classes = int(data.target(cfg.dataset.target).max()) + 1
    init = Streams.from_seed(seed).init
    if isinstance(cfg.model, ConvModel):
        return build_convnet(ConvNetSpec(
            in_channels=data.inputs.shape[1],
            blocks=tuple(ConvBlock(*b) for b in cfg.model.blocks),
            classes=n_classes), init)
    widths = (data.inputs.shape[1], *cfg.model.hidden, n_classes)
    return build_mlp(MlpSpec(widths), init)


def lr_at(cfg: ExperimentConfig, step: int, total_steps: int, steps_per_epoch: int) -> float:
    """Linear warmup, then cosine decay to zero or a constant rate."""
    opt = cfg.optimizer
    warm = opt.warmup_epochs * steps_per_epoch
    if step < warm:
        return opt.lr * (step + 1) / warm
    if opt.cosine:
        span = max(total_steps - warm, 1)
        return 0.5 * opt.lr * (1.0 + math.cos(math.pi * (step - warm) / span))
    return opt.lr


def batches(n: int, batch_size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size >= 2:  # covariance statistics need two rows
            yield idx


def logits_of(model: Model, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([model.forward(x[i:i + chunk]).data for i in range(0, len(x), chunk)])


def accuracy(model: Model, data: LabeledSet, target: np.ndarray) -> float | None:
    if len(data) == 0:
        return None
    return float(np.mean(logits_of(model, data.inputs).argmax(axis=1) == target))


@dataclass
class RunResult:
    model: Model
    report: dict
    splits: Splits


def train_model(cfg: ExperimentConfig, splits: Splits, model: Model, seed: int,
                max_steps: int | None = None, step_callback=None) -> tuple[list[dict], float]:
    """Run the optimizer over the training split, returning per-epoch history
    and the wall time spent."""
    level = cfg.dataset.target
    train = splits.train
    y_train = train.target(level)
    vcfg = cfg.vcreg.build() if cfg.vcreg is not None else None
    net: Model | VCRegModel = attach_vcreg_hooks(model, vcfg) if vcfg is not None else model
    opt = cfg.optimizer
    sgd = T.SGD(model.params, opt.lr, opt.momentum, opt.weight_decay, opt.no_decay)
    gen = T.rng(Streams.from_seed(seed).shuffle)
    steps_per_epoch = sum(1 for _ in batches(len(train), opt.batch_size, T.rng(0)))
    total = steps_per_epoch * opt.epochs
    history, step = [], 0
    t0 = time.perf_counter()
    for epoch in range(1, opt.epochs + 1):
        sup_sum, n_batches = 0.0, 0
        site_sums: dict[str, list[float]] = {}
        for idx in batches(len(train), opt.batch_size, gen):
            lr = lr_at(cfg, step, total, steps_per_epoch)
            try:
                logits = net.forward(train.inputs[idx])
                sup = T.softmax_cross_entropy(logits, y_train[idx])
                loss = sup
                if isinstance(net, VCRegModel):
                    reg = net.regularizer()
                    if reg is not None:
                        loss = T.add(sup, reg)
                grads = T.backward(loss)
            except SiteDivergedError as exc:
                T.reset_graph()
                raise TrainingDiverged(epoch, exc.site, exc) from exc
            except T.NonFiniteError as exc:
                T.reset_graph()
                raise TrainingDiverged(epoch, None, exc) from exc
            if step_callback is not None:
                step_callback(step, net, grads)
            sgd.step(grads, lr)
            sup_sum += sup.item()
            n_batches += 1
            if isinstance(net, VCRegModel):
                for name, sl in net.site_losses.items():
                    acc = site_sums.setdefault(name, [0.0, 0.0])
                    acc[0] += sl.var
                    acc[1] += sl.cov
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        history.append({
            "epoch": epoch,
            "lr": lr,
            "supervised_loss": sup_sum / max(n_batches, 1),
            "sites": {k: {"var": v[0] / n_batches, "cov": v[1] / n_batches} for k, v in site_sums.items()},
        })
        if max_steps is not None and step >= max_steps:
            break
    return history, time.perf_counter() - t0


def evaluate(cfg: ExperimentConfig, model: Model, splits: Splits, seed: int) -> dict:
    level = cfg.dataset.target
    tr, va, te = splits.train, splits.val, splits.test
    y_tr, y_va, y_te = tr.target(level), va.target(level), te.target(level)
    out: dict = {
        "train_accuracy": accuracy(model, tr, y_tr),
        "val_accuracy": accuracy(model, va, y_va),
        "test_accuracy": accuracy(model, te, y_te),
    }
    f_tr = model.features(tr.inputs)
    held = te if len(te) else tr
    f_held = model.features(held.inputs)
    try:
        out["cdnv"] = metrics.cdnv_aggregate(metrics.class_sets(f_tr, y_tr))
    except metrics.DegenerateMetricError:
        out["cdnv"] = None
    means = metrics.class_means(f_tr, y_tr, n_classes=int(splits.full.target(level).max()) + 1)
    # agreement on the training split is the collapse measure; held-out figures ride along
    out["ncc_agreement"] = metrics.ncc_agreement(logits_of(model, tr.inputs).argmax(axis=1), f_tr, means)
    out["ncc_agreement_test"] = metrics.ncc_agreement(
        logits_of(model, held.inputs).argmax(axis=1), f_held, means)
    out["ncc_accuracy"] = metrics.ncc_accuracy(f_held, held.target(level), means)

    probes = {}
    levels = {"label": level}
    if splits.full.super_labels is not None and level == "super_label":
        levels["sub_label"] = "label"
    for name, lvl in levels.items():
        res = metrics.linear_probe(f_tr, tr.target(lvl), cfg.evaluation.probe_l2,
                                   held_out=(f_held, held.target(lvl)))
        probes[name] = {"accuracy": res.accuracy, "l2": res.l2,
                        "by_l2": {repr(k): v for k, v in res.accuracies.items()}}
    out["probe"] = probes

    if splits.full.inputs.ndim == 2 and splits.full.inputs.shape[1] == 2:
        grid = boundary_grid(cfg, model, splits)
        try:
            out["boundary_margin"] = metrics.boundary_margin(grid, tr.inputs, y_tr)
        except metrics.DegenerateMetricError:
            out["boundary_margin"] = None
        out["boundary_grid_step"] = grid.step
    return out


def boundary_grid(cfg: ExperimentConfig, model: Model, splits: Splits) -> metrics.BoundaryGrid:
    ext = metrics.default_extents(splits.full.inputs, cfg.evaluation.boundary_pad)
    return metrics.decision_boundary_grid(lambda pts: logits_of(model, pts), ext,
                                          cfg.evaluation.boundary_resolution)


def run(cfg: ExperimentConfig, seed: int) -> RunResult:
    splits = make_splits(cfg, seed)
    model = make_model(cfg, splits.full, seed)
    history, seconds = train_model(cfg, splits, model, seed)
    final = evaluate(cfg, model, splits, seed)
    sites = attach_vcreg_hooks(model, cfg.vcreg.build()).sites if cfg.vcreg is not None else []
    report = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "config": cfg.model_dump(mode="json"),
        "model": model.spec_dict(),
        "boundaries": model.boundaries,
        "sites": sites,
        "data": {"n_train": len(splits.train), "n_val": len(splits.val), "n_test": len(splits.test)},
        "history": history,
        "final": final,
        "timing": {"train_seconds": seconds, "seconds_per_epoch": seconds / max(len(history), 1)},
    }
    return RunResult(model, report, splits)


def strip_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


def write_json_atomic(path: str | Path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, allow_nan=False)
    os.replace(tmp, path)


def write_text_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
