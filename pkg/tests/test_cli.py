import csv
import json
import os

import numpy as np
import pytest

from genimpute import cli, experiment
from genimpute.experiment import ExperimentConfig

FAST = {"dataset": "four_gaussians", "missingness": {"mechanism": "uniform", "rate": 0.3},
        "imputer_train": {"epochs": 3}, "dae_train": {"epochs": 2}, "predictor_train": {"epochs": 2}}


def fast_cfg(tmp_path, **kw):
    return ExperimentConfig.from_dict({**FAST, "out": str(tmp_path / "res"), **kw})


def strip(rec):
    return {k: v for k, v in rec.items() if k not in ("wall_time", "curves")}


# -- config -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError, match="sweep axes"):
        ExperimentConfig(sweep={"depth": [1]})
    with pytest.raises(ValueError, match="non-empty"):
        ExperimentConfig(sweep={"ensemble": []})
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"datset": "x"})
    with pytest.raises(ValueError):
        ExperimentConfig(method="knn")
    assert ExperimentConfig().ensemble == 128


def test_config_hash_ignores_location_only():
    a = ExperimentConfig(out="a", jobs=1)
    assert experiment.config_hash(a) == experiment.config_hash(ExperimentConfig(out="b", jobs=4))
    assert experiment.config_hash(a) != experiment.config_hash(ExperimentConfig(seed=1))


def test_expand_points():
    assert experiment.expand(ExperimentConfig()) == [{}]
    cfg = ExperimentConfig(sweep={"missing_rate": [0.1, 0.4], "method": ["gi", "mean"], "ensemble": [1, 64]})
    pts = experiment.expand(cfg)
    assert len(pts) == 4 and all("ensemble" not in p for p in pts)
    assert {(p["missing_rate"], p["method"]) for p in pts} == {(0.1, "gi"), (0.1, "mean"), (0.4, "gi"), (0.4, "mean")}


def test_resolve_landsat_from_env(tmp_path, monkeypatch):
    (tmp_path / "landsat.csv").write_text("a,label\n1,0\n")
    (tmp_path / "landsat.schema.json").write_text('{"label": "label"}')
    monkeypatch.setenv(experiment.DATA_DIR_ENV, str(tmp_path))
    path, schema = experiment.resolve_dataset("landsat")
    assert path == str(tmp_path / "landsat.csv") and schema.endswith("landsat.schema.json")
    with pytest.raises(FileNotFoundError):
        experiment.resolve_dataset(str(tmp_path / "absent.csv"))


# -- sweeps -------------------------------------------------------------------

def test_empty_sweep_one_run_per_replicate(tmp_path):
    recs = experiment.run_experiment(fast_cfg(tmp_path, replicates=3))
    assert [r["run_id"] for r in recs] == ["p000-N128-r00", "p000-N128-r01", "p000-N128-r02"]
    assert [r["seed"] for r in recs] == [0, 1, 2]
    assert all(r["status"] == "ok" for r in recs)


def test_sweep_persistence_and_aggregates(tmp_path):
    cfg = fast_cfg(tmp_path, replicates=2, sweep={"method": ["gi", "mean"], "ensemble": [1, 4]})
    recs = experiment.run_experiment(cfg)
    out = tmp_path / "res"
    assert len(recs) == 8 and len(os.listdir(out / "runs")) == 8
    assert len(os.listdir(out / "reliability")) == 8
    persisted = json.loads((out / "config.json").read_text())
    chash = persisted.pop("config_hash")
    assert persisted == cfg.to_dict()
    assert chash == experiment.config_hash(persisted)
    for r in recs:
        assert r["config_hash"] == chash
        assert all(np.isfinite(r["metrics"][m]) for m in experiment.METRICS)
        assert r["wall_time"] > 0
    assert experiment.load_records(out) == json.loads((out / "results.json").read_text())
    # baselines are deterministic: one imputation regardless of the requested ensemble
    assert {r["metrics"]["ensemble_used"] for r in recs if r["method"] == "mean"} == {1}

    summary = json.loads((out / "summary.json").read_text())
    assert len(summary) == 4
    for row in summary:
        accs = [r["metrics"]["accuracy"] for r in recs if r["point"] == row["point"]]
        assert row["n"] == 2
        assert row["accuracy_mean"] == pytest.approx(np.mean(accs))
        assert row["accuracy_std"] == pytest.approx(np.std(accs, ddof=1))
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and "±" in rows[0]["accuracy_pct"]


def test_aggregate_sample_std():
    recs = [{"point": {"ensemble": 1}, "method": "gi", "status": "ok",
             "metrics": {"accuracy": a, "rmse": None, "ece": 0.1}} for a in (0.8, 0.9, 1.0)]
    recs.append({"point": {"ensemble": 1}, "method": "gi", "status": "failed", "metrics": None})
    (row,) = experiment.aggregate(recs)
    assert row["n"] == 3 and row["failed"] == 1
    assert row["accuracy_mean"] == pytest.approx(0.9)
    assert row["accuracy_std"] == pytest.approx(0.1)
    assert row["rmse_mean"] is None and row["ece_std"] == pytest.approx(0.0)


def test_rerun_reproduces_metrics(tmp_path):
    a = experiment.run_experiment(fast_cfg(tmp_path, sweep={"ensemble": [8]}))
    b = experiment.run_experiment(fast_cfg(tmp_path / "again", sweep={"ensemble": [8]}))
    assert [strip(r) for r in a] == [strip(r) for r in b]
    assert a[0]["curves"] == b[0]["curves"]


def test_parallel_matches_serial(tmp_path):
    sweep = {"method": ["gi", "dae"], "ensemble": [4]}
    serial = experiment.run_experiment(fast_cfg(tmp_path / "s", sweep=sweep, jobs=1))
    pooled = experiment.run_experiment(fast_cfg(tmp_path / "p", sweep=sweep, jobs=2))
    assert [strip(r) for r in serial] == [strip(r) for r in pooled]


def test_failed_run_is_recorded_and_sweep_continues(tmp_path, capsys):
    cfg = {**FAST, "sweep": {"missing_rate": [0.3, 1.5]}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    rc = cli.main(["sweep", "--config", str(path), "--out", str(tmp_path / "res")])
    assert rc == 1
    recs = experiment.load_records(tmp_path / "res")
    assert [r["status"] for r in recs] == ["ok", "failed"]
    assert "missing rate" in recs[1]["error"]
    assert "1/2 runs ok" in capsys.readouterr().out


def test_missing_dataset_fails_every_run(tmp_path):
    recs = experiment.run_experiment(ExperimentConfig(dataset=str(tmp_path / "nope.csv"), replicates=2,
                                                      out=str(tmp_path / "res")))
    assert [r["status"] for r in recs] == ["failed", "failed"]
    assert "FileNotFoundError" in recs[0]["error"]


# -- pipeline subcommands ---------------------------------------------------

@pytest.mark.parametrize("method", ["gi", "dae", "mean"])
def test_train_evaluate_impute_round_trip(tmp_path, method, capsys):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(FAST))
    g, f = str(tmp_path / "g.npz"), str(tmp_path / "f.npz")
    assert cli.main(["train-imputer", "--config", str(cfgp), "--method", method, "--out", g]) == 0
    assert os.path.exists(str(tmp_path / "g.history.json"))
    assert cli.main(["train-predictor", "--imputer", g, "--out", f]) == 0
    capsys.readouterr()
    rep = tmp_path / "rep"
    assert cli.main(["evaluate", "--imputer", g, "--predictor", f, "--ensemble", "4",
                     "--report", "--out", str(rep)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert 0.0 <= result["accuracy"] <= 1.0 and result["ensemble"] == (4 if method == "gi" else 1)
    assert sorted(os.listdir(rep)) == ["evaluation.json", "psi.csv", "reliability.csv"]

    (tmp_path / "in.csv").write_text("x1,x2\n0.25,\n,0.75\n?,nan\n")
    out = tmp_path / "imp.csv"
    assert cli.main(["impute", "--imputer", g, "--input", str(tmp_path / "in.csv"),
                     "--samples", "3", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9
    assert all(float(r["x1"]) == 0.25 for r in rows if r["row"] == "0")
    assert all(float(r["x2"]) == 0.75 for r in rows if r["row"] == "1")
    assert all(np.isfinite(float(r[c])) for r in rows for c in ("x1", "x2"))


def test_impute_rejects_wrong_header(tmp_path, capsys):
    g = str(tmp_path / "m.npz")
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(FAST))
    cli.main(["train-imputer", "--config", str(cfgp), "--method", "mean", "--out", g])
    (tmp_path / "in.csv").write_text("a,b\n1,2\n")
    assert cli.main(["impute", "--imputer", g, "--input", str(tmp_path / "in.csv")]) == 2
    assert "header" in capsys.readouterr().err


def test_missing_checkpoint_exit_code(tmp_path):
    assert cli.main(["evaluate", "--imputer", str(tmp_path / "x.npz"), "--predictor", "y"]) == 2


# -- synthetic demo -------------------------------------------------------------

def test_conditional_oracle_modes():
    x1 = cli.conditional_x1(10_000, seed=0)
    near0 = np.mean(np.abs(x1) < 0.5)
    assert abs(near0 - 0.5) <= 0.05
    assert np.all(np.abs(x1 - np.round(x1)) < 0.6)
    # independent oracle: posterior weight of the x2=1 components at x2=0.1
    w_far = np.exp(-0.5 * (0.9 / 0.1) ** 2)
    assert w_far / (1 + w_far) < 1e-15
    assert x1.std() == pytest.approx(np.sqrt(0.25 + 0.01), rel=0.03)


def test_synth_demo_files_bit_identical(tmp_path):
    kw = dict(seed=3, n_samples=50, n_truth=500, gi_epochs=2, dae_epochs=2, ensemble=8)
    cli.synth_demo(out_dir=str(tmp_path / "a"), **kw)
    cli.synth_demo(out_dir=str(tmp_path / "b"), **kw)
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["panel_a_data.csv", "panel_b_truth.csv", "panel_c_gi.csv", "panel_c_psi.csv",
                     "panel_d_dae.csv", "summary.json"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    with open(tmp_path / "a" / "panel_c_psi.csv") as fh:
        psi = [float(r["psi"]) for r in csv.DictReader(fh)]
    assert sum(psi) == pytest.approx(1.0) and all(p * 8 == round(p * 8) for p in psi)


def test_synth_demo_dae_panel_is_oversmoothed(tmp_path):
    summary = cli.synth_demo(seed=0, out_dir=str(tmp_path), n_truth=1000, gi_epochs=2, ensemble=4)
    with open(tmp_path / "panel_d_dae.csv") as fh:
        x1 = np.array([float(r["x1"]) for r in csv.DictReader(fh)])
    assert np.all(np.abs(x1 - 0.5) <= 0.15)
    assert summary["dae"]["near_half"] == 1.0


# -- mask calibration -----------------------------------------------------------

def test_mask_calibrate_table(tmp_path, capsys):
    out = tmp_path / "cal.csv"
    rows = cli.mask_calibrate([0.2, 0.4, 0.5, 0.8], (32, 32), out)
    by_rate = {r["rate"]: r for r in rows}
    assert (by_rate[0.2]["alpha"], by_rate[0.2]["beta"]) == (by_rate[0.8]["alpha"], by_rate[0.8]["beta"])
    assert not by_rate[0.2]["invert"] and by_rate[0.8]["invert"]
    for r in (0.2, 0.4, 0.8):
        assert abs(by_rate[r]["achieved"] - r) <= 0.01
    assert not by_rate[0.5]["reachable"] and "unreachable" in by_rate[0.5]["note"]
    first = out.read_bytes()
    cli.mask_calibrate([0.2, 0.4, 0.5, 0.8], (32, 32), out)
    assert out.read_bytes() == first
    assert cli.main(["mask-calibrate", "--rates", "0.5", "--grid", "32", "32",
                     "--out", str(tmp_path / "c.json")]) == 0
    assert "UNREACHABLE" in capsys.readouterr().out
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["grid"] == [32, 32] and doc["rows"][0]["reachable"] is False
    with pytest.raises(ValueError):
        cli.mask_calibrate([1.0], (8, 8), tmp_path / "bad.csv")


def test_train_imputer_flags_reach_the_model(tmp_path):
    g = str(tmp_path / "g.npz")
    assert cli.main(["train-imputer", "--dataset", "four_gaussians", "--missing-rate", "0.5", "--lambda-mse", "2",
                     "--hint-rate", "0.5", "--noise-std", "0.01", "--epochs", "2", "--seed", "4", "--out", g]) == 0
    model, meta = experiment.load_imputer(g)
    assert (model.config.lambda_mse, model.config.hint_rate, model.config.training_noise_std) == (2.0, 0.5, 0.01)
    assert meta["spec"]["rate"] == 0.5 and meta["seed"] == 4
    assert meta["experiment"]["imputer_train"]["epochs"] == 2
