import copy

import jsonschema
import numpy as np
import pytest

from vcreg import bench
from vcreg.bench import BenchScenario

SMALL = dict(batch=32, width=64, sites=4, in_dim=16, classes=4)


@pytest.fixture(scope="module")
def suite():
    return bench.run_suite(BenchScenario(**SMALL))


@pytest.mark.parametrize("kw", [{"measured": 9}, {"warmup": 2}, {"variant": "cuda"}, {"batch": 1}, {"sites": 0}])
def test_scenario_validation(kw):
    with pytest.raises(ValueError):
        BenchScenario(**{**SMALL, **kw})


def test_defaults_mirror_the_reference_scenario():
    sc = BenchScenario()
    assert (sc.batch, sc.width, sc.sites, sc.threads) == (128, 512, 12, 1)
    assert sc.spec.layer_widths == (512,) + (512,) * 12 + (10,)


def test_naive_costs_more_than_identity(suite):
    assert suite["naive"].mean_ns / suite["identity"].mean_ns > 1.0


def test_predictions(suite):
    ref = suite["identity"].predictions
    assert np.array_equal(suite["fast"].predictions, ref)
    assert np.array_equal(suite["naive"].predictions, ref)
    assert suite["bn_like"].scenario["variant"] == "bn_like"


def test_samples_and_summary(suite):
    r = suite["fast"]
    assert len(r.samples_ns) == 10
    assert r.samples_ns == [f + b for f, b in zip(r.forward_ns, r.backward_ns)]
    payload = r.to_json()
    assert payload["mean_ns"] == pytest.approx(np.mean(r.samples_ns))
    assert payload["metadata"]["threads"] == 1
    assert payload["metadata"]["build_profile"].startswith("python-")


def test_output_validates_against_schema(suite):
    for r in suite.values():
        bench.validate(r.to_json())


def test_schema_rejects_malformed(suite):
    payload = copy.deepcopy(suite["fast"].to_json())
    del payload["metadata"]
    with pytest.raises(jsonschema.ValidationError):
        bench.validate(payload)
    payload = copy.deepcopy(suite["fast"].to_json())
    payload["samples_ns"] = payload["samples_ns"][:3]
    with pytest.raises(jsonschema.ValidationError):
        bench.validate(payload)


def test_ratios(suite):
    r = bench.ratios(suite)
    assert set(r) >= {"naive/identity", "fast/identity", "bn_like/identity", "fast/naive", "fast/naive backward"}


def test_fast_forward_matches_identity_forward():
    # forward is untouched by the fast path: a paired comparison sees only noise
    ratio = bench.paired_forward_ratio(BenchScenario(**SMALL), "fast", "identity", pairs=40)
    assert 0.75 < ratio < 1.33


def test_median_of_means():
    # chunk means 1, 51, 2.5, 3.5, 4.5
    assert bench.median_of_means([1, 1, 100, 2, 2, 3, 3, 4, 4, 5], groups=5) == 3.5
    assert bench.median_of_means([7]) == 7.0


def test_batch_scale_layer():
    from vcreg import tensor as T
    from vcreg.gradcheck import numeric_grad, relative_error

    x = T.rng(0).standard_normal((6, 3)) * 2 + 1
    w = T.rng(1).standard_normal((6, 3))
    y = bench.batch_scale(T.Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-14)
    np.testing.assert_allclose(y.var(axis=0), 1, atol=1e-5)
    p = T.parameter(x)
    g = T.backward(T.sum(T.mul(bench.batch_scale(p), w)))[p]
    with T.no_grad():
        fd = numeric_grad(lambda v: float(np.sum(bench.batch_scale(T.Tensor(v)).data * w)), x)
    assert relative_error(g, fd) < 1e-6


def test_non_finite_loss_is_reported():
    from vcreg.models import build_mlp

    sc = BenchScenario(**{**SMALL, "variant": "fast"})
    model = build_mlp(sc.spec, 0)
    model.params["fc1.weight"].assign(np.full(model.params["fc1.weight"].shape, 1e300))
    with pytest.raises(bench.BenchError):
        bench.run_bench(sc, model)
