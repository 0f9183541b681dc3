"""Acceptance criteria, one test each, printing one PASS/FAIL line per criterion.

The Landsat criteria share two sweeps (GI and mean imputation over four
missing rates, and the lambda-MSE variant at 40%), each over four replicates.
Sweep results are cached under ``.acceptance/`` keyed by config hash; runs
are deterministic given (config, seed), so a cache hit equals a fresh run.
Set ``GENIMPUTE_ACCEPTANCE_FRESH=1`` to recompute.
"""
import json
import os
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from genimpute import cli, experiment, imputer, masking, predictor
from genimpute.data import make_gaussian_1d
from genimpute.experiment import ExperimentConfig

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(ROOT, "data")
CACHE = os.path.join(ROOT, ".acceptance")
HAVE_LANDSAT = os.path.exists(os.path.join(DATA_DIR, "landsat.csv"))
needs_landsat = pytest.mark.skipif(not HAVE_LANDSAT, reason="run scripts/fetch_landsat.py first")

RATES = (0.1, 0.2, 0.3, 0.4)
TARGET_ACC = {0.1: 0.899, 0.2: 0.896, 0.3: 0.890, 0.4: 0.880}
ENSEMBLES = (1, 16, 64, 128)
SEEDS = 4
LAMBDA = 10.0

MAIN_SWEEP = {"dataset": "landsat", "missingness": {"mechanism": "uniform", "rate": 0.4},
              "sweep": {"missing_rate": list(RATES), "method": ["gi", "mean"], "ensemble": list(ENSEMBLES)},
              "replicates": SEEDS}
LAMBDA_SWEEP = {"dataset": "landsat", "missingness": {"mechanism": "uniform", "rate": 0.4},
                "sweep": {"lambda_mse": [LAMBDA], "ensemble": [128]}, "replicates": SEEDS}


@pytest.fixture
def say(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            status = "N/A" if ok is None else ("PASS" if ok else "FAIL")
            print(f"\ncriterion {n}: {status}  {detail}", flush=True)
    return emit


def sweep(name, cfg_dict):
    out = os.path.join(CACHE, name)
    cfg = ExperimentConfig.from_dict({**cfg_dict, "out": out})
    done = os.path.join(out, "results.json")
    if os.environ.get("GENIMPUTE_ACCEPTANCE_FRESH") != "1" and os.path.exists(done):
        with open(os.path.join(out, "config.json")) as fh:
            if json.load(fh)["config_hash"] == experiment.config_hash(cfg):
                with open(done) as fh:
                    return json.load(fh)
    shutil.rmtree(out, ignore_errors=True)
    return experiment.run_experiment(cfg)


@pytest.fixture(scope="module")
def landsat_env():
    old = os.environ.get(experiment.DATA_DIR_ENV)
    os.environ[experiment.DATA_DIR_ENV] = DATA_DIR
    yield
    if old is None:
        os.environ.pop(experiment.DATA_DIR_ENV)
    else:
        os.environ[experiment.DATA_DIR_ENV] = old


@pytest.fixture(scope="module")
def main_runs(landsat_env):
    recs = sweep("landsat_main", MAIN_SWEEP)
    assert all(r["status"] == "ok" for r in recs), [r["error"] for r in recs if r["status"] != "ok"]
    return recs


@pytest.fixture(scope="module")
def lambda_runs(landsat_env):
    recs = sweep("landsat_lambda", LAMBDA_SWEEP)
    assert all(r["status"] == "ok" for r in recs)
    return recs


def select(recs, metric, **point):
    vals = [r["metrics"][metric] for r in recs if all(r["point"].get(k) == v for k, v in point.items())]
    assert len(vals) == SEEDS, (point, len(vals))
    return np.array(vals)


def wall(recs, **point):
    # one job produces every ensemble size, so count each replicate once
    return sum(r["wall_time"] for r in recs
               if all(r["point"].get(k) == v for k, v in point.items()) and r["point"]["ensemble"] == 128)


@pytest.mark.slow
@needs_landsat
def test_criterion_1_landsat_accuracy(main_runs, say):
    ok, parts = True, []
    for r in RATES:
        acc = select(main_runs, "accuracy", missing_rate=r, method="gi", ensemble=128).mean()
        minutes = wall(main_runs, missing_rate=r, method="gi") / 60
        hit = abs(acc - TARGET_ACC[r]) <= 0.015 and minutes <= 60
        ok &= hit
        parts.append(f"{int(r * 100)}%: {acc * 100:.2f} vs {TARGET_ACC[r] * 100:.1f} ({minutes:.0f} min)")
    gi40 = select(main_runs, "accuracy", missing_rate=0.4, method="gi", ensemble=128).mean()
    mean40 = select(main_runs, "accuracy", missing_rate=0.4, method="mean", ensemble=128).mean()
    gap = gi40 - mean40
    ok &= gap >= 0.005
    parts.append(f"GI - mean at 40% = {gap * 100:.2f} pts")
    say(1, ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
@needs_landsat
def test_criterion_2_landsat_rmse(main_runs, lambda_runs, say):
    gi_rmse = select(main_runs, "rmse", missing_rate=0.4, method="gi", ensemble=128).mean()
    lam_rmse = select(lambda_runs, "rmse", lambda_mse=LAMBDA, ensemble=128).mean()
    gi_acc = select(main_runs, "accuracy", missing_rate=0.4, method="gi", ensemble=128).mean()
    lam_acc = select(lambda_runs, "accuracy", lambda_mse=LAMBDA, ensemble=128).mean()
    band = 0.08 <= gi_rmse <= 0.20
    ok = band and lam_rmse < gi_rmse and lam_acc <= gi_acc
    say(2, ok, f"GI RMSE {gi_rmse:.4f} (band [0.08, 0.20]); lambda={LAMBDA:g} RMSE {lam_rmse:.4f}; "
               f"accuracy GI {gi_acc * 100:.2f} vs lambda {lam_acc * 100:.2f}")
    assert ok


def test_criterion_3_conditional_distribution(tmp_path, say):
    s = cli.synth_demo(seed=0, out_dir=str(tmp_path))
    gi = np.loadtxt(tmp_path / "panel_c_gi.csv", skiprows=1)
    dae = np.loadtxt(tmp_path / "panel_d_dae.csv", skiprows=1)
    cond_mean = np.loadtxt(tmp_path / "panel_b_truth.csv", skiprows=1).mean()
    assert gi.size == 1000
    near0, near1 = np.mean(np.abs(gi) < 0.25), np.mean(np.abs(gi - 1) < 0.25)
    psi_max = max(s["psi"])
    dae_near = np.mean(np.abs(dae - cond_mean) < 0.25)
    ok = 0.3 <= near0 <= 0.7 and 0.3 <= near1 <= 0.7 and psi_max <= 0.7 and dae_near >= 0.8
    say(3, ok, f"GI mass near 0 / 1 = {near0:.3f} / {near1:.3f}; max psi {psi_max:.3f} (N=128); "
               f"DAE within 0.25 of conditional mean {cond_mean:.3f}: {dae_near:.3f}")
    assert ok


def test_criterion_4_lambda_bias(say):
    t0 = time.perf_counter()
    ds = make_gaussian_1d(seed=0)
    spec = masking.MissingnessSpec("uniform", 0.5)
    stds = []
    for lam in (0.0, 1.0, 10.0):
        model, _ = imputer.train_imputer(ds, spec, model_cfg=imputer.ImputerConfig(lambda_mse=lam), seed=0)
        out = model.sample(np.zeros((2000, 1)), np.zeros((2000, 1)), np.random.default_rng(0))
        stds.append(float(out.std(ddof=1)))
    minutes = (time.perf_counter() - t0) / 60
    monotone = stds[0] >= stds[1] >= stds[2]
    ok = monotone and stds[2] < 0.5 * stds[0] and minutes <= 5
    say(4, ok, f"imputation std at lambda 0/1/10 = {stds[0]:.4f} / {stds[1]:.4f} / {stds[2]:.4f}; "
               f"{minutes:.1f} min")
    assert ok


@pytest.mark.slow
@needs_landsat
def test_criterion_5_ensemble_ablation(main_runs, say):
    acc = {n: select(main_runs, "accuracy", missing_rate=0.4, method="gi", ensemble=n).mean() for n in ENSEMBLES}
    steps = np.diff([acc[n] for n in ENSEMBLES])
    ok = bool(np.all(steps >= 0)) and abs(acc[128] - acc[64]) <= 0.005
    say(5, ok, "mean accuracy " + ", ".join(f"N={n}: {acc[n] * 100:.2f}" for n in ENSEMBLES))
    assert ok


@pytest.mark.slow
@needs_landsat
def test_criterion_6_calibration(main_runs, lambda_runs, say):
    gi = select(main_runs, "ece", missing_rate=0.4, method="gi", ensemble=128)
    lam = select(lambda_runs, "ece", lambda_mse=LAMBDA, ensemble=128)
    ok = gi.mean() <= 0.08 and gi.mean() <= lam.mean()
    say(6, ok, f"ECE GI {gi.mean():.4f} (seeds {np.round(gi, 4).tolist()}); lambda={LAMBDA:g} {lam.mean():.4f}")
    assert ok


PROPERTY_SUITES = [
    "tests/test_nn.py::test_gradient_check_random_nets",
    "tests/test_imputer.py::test_observed_entries_preserved_over_random_pairs",
    "tests/test_imputer.py::test_impute_examples",
    "tests/test_masking.py::test_hash_seed_is_stable_across_processes",
    "tests/test_masking.py::test_uniform_mask_properties",
    "tests/test_masking.py::test_row_wise_masks_match_single_vector_masks",
    "tests/test_masking.py::test_uniform_rate_concentration",
    "tests/test_masking.py::test_calibration_hits_target",
    "tests/test_kernels.py",
    "tests/test_predictor.py::test_psi_simplex_and_quantization",
    "tests/test_predictor.py::test_single_member_is_one_hot",
    "tests/test_predictor.py::test_noisy_label_accuracy",
]


def test_criterion_7_property_suites(say):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITES],
                          cwd=ROOT, capture_output=True, text=True)
    # realized rectangular-mask rates on 10^4 vectors
    rates = {}
    X = np.random.default_rng(0).normal(size=(10_000, 32 * 32))
    for r in (0.2, 0.4, 0.6, 0.8):
        spec = masking.MissingnessSpec.rectangular(r, (32, 32))
        rates[r] = 1.0 - masking.make_masks(X, spec).mean()
    seconds = time.perf_counter() - t0
    rect_ok = all(abs(rates[r] - r) <= 0.03 for r in rates)
    ok = proc.returncode == 0 and rect_ok and seconds <= 120
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    say(7, ok, f"property suites: {tail}; rectangular rates "
               + ", ".join(f"{r}->{v:.3f}" for r, v in rates.items()) + f"; {seconds:.0f} s")
    assert ok, proc.stdout[-3000:]


def test_criterion_8_out_of_scope(say):
    with_note = "CIFAR-10 FID and CIFAR/MIT-BIH/Diabetes tables are not reproduced at desk scale"
    say(8, None, f"{with_note}; covered by criteria 1-6")
    pytest.skip(with_note)
