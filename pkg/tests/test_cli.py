import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from vcreg import bench, cli, config, train

TINY = {
    "dataset": {"source": {"kind": "two_moons", "n": 40}},
    "model": {"hidden": [8, 8]},
    "optimizer": {"epochs": 2, "batch_size": 16},
    "evaluation": {"boundary_resolution": 12, "probe_l2": [0.01]},
}


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    # commands without --out write under the config's outputs dir, relative to cwd
    monkeypatch.chdir(tmp_path)


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def test_train_writes_outputs(tmp_path):
    cfg = write(tmp_path, "c.yaml", TINY)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    resolved = config.load(out / "resolved_config.yaml")
    assert resolved.seeds == [3] and resolved.optimizer.lr == 0.05  # defaults filled in
    rep = json.loads((out / "report_seed3.json").read_text())
    assert rep["seed"] == 3 and rep["schema_version"] == train.SCHEMA_VERSION
    assert (out / "checkpoint_seed3.bin").exists() and (out / "checkpoint_seed3.json").exists()


def test_train_is_reproducible(tmp_path):
    cfg = write(tmp_path, "c.yaml", TINY)
    reports = []
    for run in ("a", "b"):
        cli.main(["train", "--config", cfg, "--out", str(tmp_path / run)])
        reports.append(train.strip_timing(json.loads((tmp_path / run / "report_seed0.json").read_text())))
    assert reports[0] == reports[1]


@pytest.mark.parametrize("data", [{"optimizer": {"lr": 0}}, {"unknown": 1}, {"vcreg": {"penalty": "l3"}}])
def test_config_errors_exit_2(tmp_path, data, caplog):
    assert cli.main(["train", "--config", write(tmp_path, "bad.yaml", data)]) == 2
    assert "config error" in caplog.text


def test_missing_config_file_exits_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_placement_mismatch_exits_2(tmp_path):
    cfg = write(tmp_path, "c.yaml", {**TINY, "vcreg": {"placement": "every_downsample"}})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_divergence_exits_1_with_site_and_epoch(tmp_path, caplog):
    cfg = write(tmp_path, "c.yaml", {**TINY, "optimizer": {"lr": 1e6, "epochs": 3},
                                     "vcreg": {"alpha": 1000.0, "beta": 1000.0}})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "epoch" in caplog.text


def test_argparse_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["train"])
    assert info.value.code == 2


def test_probe_and_boundary_from_checkpoint(tmp_path):
    cfg = write(tmp_path, "c.yaml", TINY)
    out = tmp_path / "run"
    cli.main(["train", "--config", cfg, "--out", str(out)])
    ckpt = str(out / "checkpoint_seed0")
    assert cli.main(["probe", "--config", cfg, "--checkpoint", ckpt, "--out", str(out)]) == 0
    probe = json.loads((out / "probe_label.json").read_text())
    assert 0.0 <= probe["accuracy"] <= 1.0 and probe["l2"] == 0.01
    assert cli.main(["probe", "--config", cfg, "--checkpoint", ckpt, "--level", "sub_label"]) == 2
    assert cli.main(["boundary", "--config", cfg, "--checkpoint", ckpt, "--out", str(out)]) == 0
    with open(out / "boundary_seed0.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "y", "pred_class", "margin"] and len(rows) == 1 + 12 * 12


def test_probe_rejects_mismatched_checkpoint(tmp_path):
    cfg = write(tmp_path, "c.yaml", TINY)
    cli.main(["train", "--config", cfg, "--out", str(tmp_path / "run")])
    hier = write(tmp_path, "h.yaml", {**TINY, "dataset": {"source": {"kind": "hierarchical_gaussians",
                                                                     "n_per_sub": 10, "d": 3}}})
    assert cli.main(["probe", "--config", hier, "--checkpoint", str(tmp_path / "run" / "checkpoint_seed0")]) == 1


def test_boundary_needs_2d_inputs(tmp_path):
    cfg = write(tmp_path, "h.yaml", {**TINY, "dataset": {"source": {"kind": "hierarchical_gaussians",
                                                                    "n_per_sub": 10, "d": 3}}})
    assert cli.main(["boundary", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_bench_writes_schema_valid_json(tmp_path):
    cfg = write(tmp_path, "b.yaml", {"variants": ["identity", "fast"], "batch": 8, "width": 8,
                                     "sites": 2, "in_dim": 4, "classes": 3})
    out = tmp_path / "bench"
    assert cli.main(["bench", "--config", cfg, "--out", str(out)]) == 0
    for v in ("identity", "fast"):
        bench.validate(json.loads((out / f"bench_{v}.json").read_text()))
    assert "fast/identity" in json.loads((out / "bench_summary.json").read_text())


def test_bench_malformed_scenario_exits_2(tmp_path):
    assert cli.main(["bench", "--config", write(tmp_path, "b.yaml", {"measured": 2})]) == 2
    assert cli.main(["bench", "--config", write(tmp_path, "b.yaml", {"variants": ["gpu"]})]) == 2


def test_sweep_full_grid(tmp_path):
    cfg = write(tmp_path, "s.yaml", {"base": TINY})
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    reports = sorted(out.glob("*/report_seed0.json"))
    assert len(reports) == 20
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20
    vals = [float(r["val_accuracy"]) for r in rows]
    assert vals == sorted(vals, reverse=True)
    assert json.loads((out / "failures.json").read_text()) == []


def test_single_cell_sweep_equals_train(tmp_path):
    base = {**TINY, "vcreg": {"alpha": 0.32, "beta": 0.02}}
    cli.main(["train", "--config", write(tmp_path, "c.yaml", base), "--out", str(tmp_path / "t")])
    cli.main(["sweep", "--config", write(tmp_path, "s.yaml", {"base": TINY, "alphas": [0.32], "betas": [0.02]}),
              "--out", str(tmp_path / "s")])
    a = json.loads((tmp_path / "t" / "report_seed0.json").read_text())
    b = json.loads((tmp_path / "s" / "alpha0.32_beta0.02" / "report_seed0.json").read_text())
    assert train.strip_timing(a) == train.strip_timing(b)


def test_sweep_records_failures_and_continues(tmp_path):
    # beta 1e12 diverges, 0.04 trains normally
    cfg = write(tmp_path, "s.yaml", {"base": TINY, "alphas": [0.64], "betas": [0.04, 1e12]})
    out = tmp_path / "s"
    code = cli.main(["sweep", "--config", cfg, "--out", str(out)])
    failures = json.loads((out / "failures.json").read_text())
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert code == 0
    assert [r["beta"] for r in rows] == ["0.04"]
    assert len(failures) == 1 and failures[0]["beta"] == 1e12


def test_sweep_all_cells_fail_exits_1(tmp_path):
    base = {**TINY, "optimizer": {"lr": 1e6, "epochs": 3}, "vcreg": {"alpha": 1000.0, "beta": 1000.0}}
    cfg = write(tmp_path, "s.yaml", {"base": base, "alphas": [1000.0], "betas": [1000.0]})
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 1


def test_sweep_parallel_workers_match_sequential(tmp_path):
    spec = {"base": TINY, "alphas": [0.64, 0.16], "betas": [0.04]}
    cfg = write(tmp_path, "s.yaml", spec)
    cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "seq")])
    cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "par"), "--workers", "2"])
    for cell in ("alpha0.64_beta0.04", "alpha0.16_beta0.04"):
        a = json.loads((tmp_path / "seq" / cell / "report_seed0.json").read_text())
        b = json.loads((tmp_path / "par" / cell / "report_seed0.json").read_text())
        assert train.strip_timing(a) == train.strip_timing(b)


def test_summary_ranking_puts_missing_val_last():
    rows = [{"alpha": 1.0, "beta": 0.1, "val_accuracy": None, "test_accuracy": None, "train_accuracy": 1.0,
             "seeds": 1, "dir": "a"},
            {"alpha": 0.5, "beta": 0.1, "val_accuracy": 0.9, "test_accuracy": 0.8, "train_accuracy": 1.0,
             "seeds": 1, "dir": "b"}]
    lines = cli.summary_csv(rows).splitlines()
    assert lines[1].startswith("1,0.5") and lines[2].startswith("2,1.0")
    assert np.isfinite(float(lines[1].split(",")[3]))


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize("name,kind", [
    ("two_moons.yaml", config.ExperimentConfig), ("two_moons_baseline.yaml", config.ExperimentConfig),
    ("hierarchy.yaml", config.ExperimentConfig), ("sweep.yaml", config.SweepConfig),
    ("bench.yaml", config.BenchConfig),
])
def test_shipped_configs_load(name, kind):
    assert isinstance(config.load(CONFIGS / name, kind), kind)
