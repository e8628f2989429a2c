"""End-to-end acceptance checks.

Each test prints one ``PASS`` or ``FAIL`` line with the measured value. The
lines are repeated in the terminal summary (see ``conftest.py``), so they show
up in ``pytest -v`` output without ``-s``.
"""

import itertools
import math
import time

import numpy as np
import pytest

from vcreg import bench, config, core, metrics, train
from vcreg import tensor as T
from vcreg.core import FeatureBatch, VCRegConfig
from vcreg.gradcheck import numeric_grad, relative_error
from vcreg.hooks import attach_vcreg_hooks
from vcreg.models import MlpSpec, build_mlp

RESULTS: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)


def loop_vcreg(h, alpha, beta, eps, penalty, delta):
    """Scalar reference with explicit loops over samples and dimensions."""
    n, d = len(h), len(h[0])
    mean = [sum(h[i][j] for i in range(n)) / n for j in range(d)]
    c = [[sum((h[i][a] - mean[a]) * (h[i][b] - mean[b]) for i in range(n)) / (n - 1)
          for b in range(d)] for a in range(d)]
    var = sum(max(0.0, 1.0 - math.sqrt(c[i][i] + eps)) for i in range(d)) / d

    def pen(x):
        if penalty == "squared":
            return x * x
        return x * x if abs(x) <= delta else 2 * delta * abs(x) - delta * delta

    cov = sum(pen(c[i][j]) for i in range(d) for j in range(d) if i != j) / (d * (d - 1))
    return alpha * var + beta * cov


# --------------------------------------------------------------------------
# exact math


def test_criterion_01_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    cases = list(itertools.product((2, 4, 16), (2, 3, 8), ("squared", "smooth_l1")))
    for (n, d, penalty), rep in itertools.product(cases, range(12)):
        g = T.rng(1000 * count + 7)
        scale = g.uniform(0.3, 3.0)
        h = g.standard_normal((n, d)) * scale + g.standard_normal(d)
        cfg = VCRegConfig(alpha=g.uniform(0.1, 2.0), beta=g.uniform(0.1, 2.0), epsilon=1e-4,
                          penalty=penalty)
        analytic = core.vcreg_gradient(h, cfg)
        fd = numeric_grad(lambda v: core.vcreg_loss(v, cfg), h)
        worst = max(worst, relative_error(analytic, fd))
        count += 1
    seconds = time.perf_counter() - t0
    ok = count >= 200 and worst < 1e-6 and seconds < 30
    record(1, "gradient vs finite differences", ok,
           f"{count} batches, max rel err {worst:.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_04_spatial_flatten_equals_location_loop():
    worst = 0.0
    exact = True
    for k in range(50):
        g = T.rng(k)
        shape = tuple(int(v) for v in g.integers(1, 4, size=4))
        shape = (shape[0], shape[1] + 1, shape[2], shape[3])  # C >= 2 for a covariance term
        if shape[0] * shape[2] * shape[3] < 2:
            shape = (2,) + shape[1:]
        x = g.standard_normal(shape) * g.uniform(0.2, 2.0)
        n0, c, hh, ww = shape
        rows = [[x[n, ch, i, j] for ch in range(c)]
                for n in range(n0) for i in range(hh) for j in range(ww)]
        cfg = VCRegConfig(alpha=0.64, beta=0.04)
        flat = core.spatial_flatten(x)
        oracle_batch = FeatureBatch(np.array(rows), origin=shape)
        exact &= np.array_equal(flat.matrix, oracle_batch.matrix)
        exact &= core.vcreg_loss(flat, cfg) == core.vcreg_loss(oracle_batch, cfg)
        ref = loop_vcreg(rows, 0.64, 0.04, 1e-4, "smooth_l1", 1.0)
        worst = max(worst, abs(core.vcreg_loss(flat, cfg) - ref) / max(abs(ref), 1e-12))
    ok = exact and worst < 1e-12
    record(4, "spatial flatten vs per-location loop", ok,
           f"50 tensors, identical rows and loss: {exact}, rel err vs scalar loop {worst:.1e}")
    assert ok


def test_criterion_05_smooth_l1_knee_is_continuous():
    worst_v, worst_d = 0.0, 0.0
    t = 1e-10
    for delta in (0.5, 1.0, 2.0):
        for sign in (1.0, -1.0):
            lo, hi = sign * (delta - t), sign * (delta + t)
            worst_v = max(worst_v, abs(core.smooth_l1(hi, delta) - core.smooth_l1(lo, delta)))
            worst_d = max(worst_d, abs(core.smooth_l1_grad(hi, delta) - core.smooth_l1_grad(lo, delta)))
            # both branch formulas evaluated at the knee itself
            at = sign * delta
            worst_v = max(worst_v, abs(at * at - (2 * delta * abs(at) - delta * delta)))
            worst_d = max(worst_d, abs(2 * at - 2 * delta * np.sign(at)))
    ok = worst_v < 1e-8 and worst_d < 1e-8
    record(5, "smooth-L1 knee continuity", ok, f"value gap {worst_v:.1e}, derivative gap {worst_d:.1e}")
    assert ok


# --------------------------------------------------------------------------
# network properties


MOONS = {"optimizer": {"epochs": 200, "lr": 0.05, "batch_size": 64}}


def _grads_per_step(path: str, steps: int, seed: int):
    cfg = config.parse({**MOONS, "vcreg": {"alpha": 0.64, "beta": 0.04, "path": path}})
    splits = train.make_splits(cfg, seed)
    model = train.make_model(cfg, splits.full, seed)
    names = sorted(model.params)
    seen = []

    def keep(step, net, grads):
        seen.append([grads[model.params[k]].copy() for k in names])

    train.train_model(cfg, splits, model, seed, max_steps=steps, step_callback=keep)
    acc = train.accuracy(model, splits.test, splits.test.labels)
    return seen, acc


def test_criterion_02_fast_and_naive_training_agree():
    t0 = time.perf_counter()
    fast, acc_fast = _grads_per_step("fast", 50, 0)
    naive, acc_naive = _grads_per_step("naive", 50, 0)
    worst = max(float(np.max(np.abs(a - b))) for gf, gn in zip(fast, naive) for a, b in zip(gf, gn))
    seconds = time.perf_counter() - t0
    ok = (len(fast) == len(naive) == 50 and worst < 1e-9
          and round(acc_fast, 4) == round(acc_naive, 4) and seconds < 60)
    record(2, "fast vs naive training", ok,
           f"50 steps, max grad diff {worst:.1e}, test acc {acc_fast:.4f} vs {acc_naive:.4f}, {seconds:.1f}s")
    assert ok


def test_criterion_03_fast_hooks_leave_predictions_unchanged():
    model = build_mlp(MlpSpec((2, 128, 128, 2)), 0)
    net = attach_vcreg_hooks(model, VCRegConfig(alpha=0.64, beta=0.04, path="fast"))
    x = T.rng(1).standard_normal((1000, 2)) * 2.0
    plain = model.forward(x).data
    hooked = net(x).data
    T.reset_graph()
    same = np.array_equal(plain, hooked) and np.array_equal(plain.argmax(1), hooked.argmax(1))
    record(3, "forward invariance", same, f"1000 inputs, logits bit-identical: {same}")
    assert same


def test_criterion_10_zero_weights_are_neutral():
    def params_after(vcreg):
        cfg = config.parse({**MOONS, "vcreg": vcreg})
        splits = train.make_splits(cfg, 5)
        model = train.make_model(cfg, splits.full, 5)
        train.train_model(cfg, splits, model, 5, max_steps=100)
        return {k: p.data.copy() for k, p in model.params.items()}

    zero = params_after({"alpha": 0.0, "beta": 0.0})
    none = params_after(None)
    same = zero.keys() == none.keys() and all(np.array_equal(zero[k], none[k]) for k in zero)
    record(10, "zero-weight neutrality", same, f"100 steps, parameters bit-identical: {same}")
    assert same


# --------------------------------------------------------------------------
# desk-scale reproductions


@pytest.mark.slow
def test_criterion_06_two_moon_margins():
    t0 = time.perf_counter()
    margins = {}
    for label, vc in (("vcreg", {"alpha": 0.64, "beta": 0.04, "placement": "every_block"}),
                      ("baseline", {"alpha": 0.0, "beta": 0.0})):
        cfg = config.parse({**MOONS, "dataset": {"source": {"gap": 0.5, "noise_sd": 0.05}}, "vcreg": vc})
        margins[label] = np.array([train.run(cfg, s).report["final"]["boundary_margin"] for s in range(10)])
    wins = int(np.sum(margins["vcreg"] > margins["baseline"]))
    mv, mb = margins["vcreg"].mean(), margins["baseline"].mean()
    seconds = time.perf_counter() - t0
    ok = mv > mb and wins >= 8 and seconds < 600
    record(6, "two-moon margins", ok,
           f"mean margin {mv:.3f} vs {mb:.3f}, VCReg wider in {wins}/10 seeds, {seconds:.0f}s")
    assert ok


HIER = {
    "dataset": {"source": {"kind": "hierarchical_gaussians", "n_super": 4, "subs_per_super": 3,
                           "n_per_sub": 200, "d": 16, "super_spread": 0.5, "sub_spread": 0.4,
                           "within_sd": 0.6},
                "target": "super_label", "split": [0.5, 0.1, 0.4]},
    "model": {"hidden": [128, 128]},
    "optimizer": {"epochs": 300, "lr": 0.01, "weight_decay": 5e-4},
}


@pytest.fixture(scope="module")
def hierarchy_runs():
    out = {}
    for label, vc in (("vcreg", {"alpha": 0.64, "beta": 0.04}), ("baseline", {"alpha": 0.0, "beta": 0.0})):
        cfg = config.parse({**HIER, "vcreg": vc})
        out[label] = [train.run(cfg, s).report["final"] for s in range(5)]
    return out


@pytest.mark.slow
def test_criterion_07_collapse_metrics(hierarchy_runs):
    v, b = hierarchy_runs["vcreg"], hierarchy_runs["baseline"]
    cdnv_wins = sum(x["cdnv"] > y["cdnv"] for x, y in zip(v, b))
    ncc_wins = sum(x["ncc_agreement"] < y["ncc_agreement"] for x, y in zip(v, b))
    ok = cdnv_wins >= 4 and ncc_wins >= 4
    record(7, "collapse metrics direction", ok,
           f"CDNV higher {cdnv_wins}/5 (mean {np.mean([x['cdnv'] for x in v]):.3f} vs "
           f"{np.mean([y['cdnv'] for y in b]):.3f}), NCC agreement lower {ncc_wins}/5 "
           f"(mean {np.mean([x['ncc_agreement'] for x in v]):.3f} vs "
           f"{np.mean([y['ncc_agreement'] for y in b]):.3f})")
    assert ok


@pytest.mark.slow
def test_criterion_08_subclass_probe(hierarchy_runs):
    v = [r["probe"]["sub_label"]["accuracy"] for r in hierarchy_runs["vcreg"]]
    b = [r["probe"]["sub_label"]["accuracy"] for r in hierarchy_runs["baseline"]]
    wins = sum(x > y for x, y in zip(v, b))
    ok = wins >= 4
    record(8, "subclass probe direction", ok,
           f"higher in {wins}/5 seeds, mean {np.mean(v):.3f} vs {np.mean(b):.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_09_fast_path_backward_speedup():
    t0 = time.perf_counter()
    suite = bench.run_suite(bench.BenchScenario(batch=128, width=512, sites=12), ("naive", "fast"))
    ratio = bench.ratios(suite)["fast/naive backward"]
    seconds = time.perf_counter() - t0
    ok = ratio <= 0.5 and seconds < 120
    record(9, "fast-path backward speedup", ok,
           f"fast/naive backward {ratio:.3f} at batch 128, D=512, 12 sites, {seconds:.0f}s")
    assert ok
