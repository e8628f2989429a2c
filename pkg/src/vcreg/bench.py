"""Forward/backward latency harness.

Four variants share one model, one input batch and one seed:

* ``identity``: the plain network, no regularizer.
* ``naive``: VCReg terms built into the autodiff graph.
* ``fast``: VCReg gradient injected at identity nodes.
* ``bn_like``: a batch centering-and-scaling layer at every site. It has a
  similar memory-traffic pattern, but it changes the forward pass, so its
  predictions differ from the others.

Timings are wall-clock ``perf_counter_ns`` per iteration, after warmup.
"""

from __future__ import annotations

import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources

import jsonschema
import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import tensor as T
from .core import VCRegConfig
from .hooks import attach_vcreg_hooks
from .models import MLP, MlpSpec, build_mlp

VARIANTS = ("identity", "naive", "fast", "bn_like")


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchScenario:
    """An MLP with ``sites`` hidden layers of ``width`` units; every hidden
    block is a VCReg site."""

    variant: str = "fast"
    batch: int = 128
    width: int = 512
    sites: int = 12
    in_dim: int = 512
    classes: int = 10
    warmup: int = 3
    measured: int = 10
    threads: int = 1
    seed: int = 0
    alpha: float = 0.64
    beta: float = 0.04
    penalty: str = "squared"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.measured < 10:
            raise ValueError("measured iterations must be >= 10")
        if self.warmup < 3:
            raise ValueError("warmup iterations must be >= 3")
        for name in ("batch", "width", "sites", "in_dim", "classes", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch < 2:
            raise ValueError("batch must be >= 2 for covariance statistics")

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec((self.in_dim,) + (self.width,) * self.sites + (self.classes,))


@dataclass
class BenchResult:
    scenario: dict
    samples_ns: list[int]
    forward_ns: list[int]
    backward_ns: list[int]
    metadata: dict
    predictions: np.ndarray = field(repr=False)

    @property
    def mean_ns(self) -> float:
        return float(np.mean(self.samples_ns))

    @property
    def std_ns(self) -> float:
        return float(np.std(self.samples_ns, ddof=1))

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "samples_ns": self.samples_ns,
            "mean_ns": self.mean_ns,
            "std_ns": self.std_ns,
            "median_of_means_ns": median_of_means(self.samples_ns),
            "forward": _summary(self.forward_ns),
            "backward": _summary(self.backward_ns),
            "metadata": self.metadata,
        }


def _summary(samples: list[int]) -> dict:
    return {"samples_ns": samples, "mean_ns": float(np.mean(samples)),
            "std_ns": float(np.std(samples, ddof=1)), "median_of_means_ns": median_of_means(samples)}


def median_of_means(samples, groups: int = 5) -> float:
    """Median of the means of ``groups`` contiguous chunks."""
    s = np.asarray(samples, dtype=np.float64)
    k = max(1, min(groups, s.size))
    return float(np.median([c.mean() for c in np.array_split(s, k)]))


def metadata(threads: int) -> dict:
    return {
        "threads": threads,
        "build_profile": "python" + ("-debug" if hasattr(sys, "gettotalrefcount") else "-release"),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "cpu_count": os.cpu_count(),
        "blas": [{k: info.get(k) for k in ("internal_api", "version", "num_threads", "threading_layer")}
                 for info in threadpool_info()],
        "clock": "perf_counter_ns",
    }


def batch_scale(h: T.Tensor, eps: float = 1e-5) -> T.Tensor:
    """(h - mean) / sqrt(var + eps) over the batch axis, as one graph node."""
    x = h.data
    mu = x.mean(axis=0)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=0) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=0)
        gym = (g * y).mean(axis=0)
        return ((g - gm - y * gym) * inv,)

    return T._record("batch_scale", (h,), y, bw)


def _inputs(sc: BenchScenario) -> tuple[np.ndarray, np.ndarray]:
    gen = T.rng(sc.seed)
    x = gen.standard_normal((sc.batch, sc.in_dim))
    y = np.arange(sc.batch) % sc.classes
    return x, y


def _step(model: MLP, sc: BenchScenario, x: np.ndarray, y: np.ndarray):
    """One timed forward (including loss) and backward. Returns
    (forward_ns, backward_ns, logits)."""
    t0 = time.perf_counter_ns()
    if sc.variant in ("naive", "fast"):
        net = attach_vcreg_hooks(model, VCRegConfig(alpha=sc.alpha, beta=sc.beta, penalty=sc.penalty,
                                                    path=sc.variant, placement="every_block"))
        logits = net(x)
        loss = net.loss(logits, y)
    else:
        hook = (lambda _name, h: batch_scale(h)) if sc.variant == "bn_like" else None
        logits = model.forward(x, hook)
        loss = T.softmax_cross_entropy(logits, y)
    t1 = time.perf_counter_ns()
    if not np.isfinite(loss.item()):
        raise BenchError(f"non-finite loss in variant {sc.variant!r}")
    T.backward(loss)
    t2 = time.perf_counter_ns()
    return t1 - t0, t2 - t1, logits.data


def run_bench(sc: BenchScenario, model: MLP | None = None) -> BenchResult:
    """Time ``sc.measured`` forward+backward iterations after ``sc.warmup``.

    Parameters are never updated, so every iteration sees the same network
    and the same batch.
    """
    model = model if model is not None else build_mlp(sc.spec, sc.seed)
    x, y = _inputs(sc)
    fw, bw = [], []
    with threadpool_limits(limits=sc.threads):
        try:
            for it in range(sc.warmup + sc.measured):
                f, b, logits = _step(model, sc, x, y)
                if it >= sc.warmup:
                    fw.append(f)
                    bw.append(b)
        except FloatingPointError as exc:  # NonFiniteError and SiteDivergedError
            raise BenchError(f"non-finite values in variant {sc.variant!r}: {exc}") from exc
        finally:
            T.reset_graph()
    return BenchResult(
        scenario=asdict(sc),
        samples_ns=[f + b for f, b in zip(fw, bw)],
        forward_ns=fw,
        backward_ns=bw,
        metadata=metadata(sc.threads),
        predictions=logits.argmax(axis=1),
    )


def run_suite(base: BenchScenario, variants=VARIANTS) -> dict[str, BenchResult]:
    """Run several variants on one shared model; check that predictions of
    identity, naive and fast agree exactly."""
    model = build_mlp(base.spec, base.seed)
    out = {}
    for v in variants:
        sc = BenchScenario(**{**asdict(base), "variant": v})
        out[v] = run_bench(sc, model)
    ref = out.get("identity")
    if ref is not None:
        for v in ("naive", "fast"):
            if v in out and not np.array_equal(out[v].predictions, ref.predictions):
                raise BenchError(f"variant {v!r} changed predictions")
    return out


def paired_forward_ratio(base: BenchScenario, a: str, b: str, pairs: int = 30) -> float:
    """Median of per-pair forward-time ratios a/b, with the two variants
    alternating on one model and batch so drift hits both equally."""
    model = build_mlp(base.spec, base.seed)
    x, y = _inputs(base)
    sa = BenchScenario(**{**asdict(base), "variant": a})
    sb = BenchScenario(**{**asdict(base), "variant": b})
    out = []
    with threadpool_limits(limits=base.threads):
        for it in range(base.warmup + pairs):
            fa = _step(model, sa, x, y)[0]
            fb = _step(model, sb, x, y)[0]
            if it >= base.warmup:
                out.append(fa / fb)
    return float(np.median(out))


def ratios(results: dict[str, BenchResult]) -> dict[str, float]:
    """Mean-time ratios against identity and fast against naive."""
    r: dict[str, float] = {}
    mean = {k: v.mean_ns for k, v in results.items()}
    back = {k: float(np.mean(v.backward_ns)) for k, v in results.items()}
    if "identity" in mean:
        for k in mean:
            if k != "identity":
                r[f"{k}/identity"] = mean[k] / mean["identity"]
    if "fast" in mean and "naive" in mean:
        r["fast/naive"] = mean["fast"] / mean["naive"]
        r["fast/naive backward"] = back["fast"] / back["naive"]
    return r


def schema() -> dict:
    return json.loads(resources.files("vcreg").joinpath("bench_schema.json").read_text())


def validate(payload: dict) -> None:
    jsonschema.validate(payload, schema())
