"""Experiment orchestration: config, per-run pipeline, sweeps and persistence."""
from __future__ import annotations

import csv
import functools
import hashlib
import itertools
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import baselines, data, imputer, masking, predictor
from .nn import load_checkpoint

log = logging.getLogger(__name__)

DATA_DIR_ENV = "GENIMPUTE_DATA_DIR"
BUILTIN = ("four_gaussians", "gaussian_1d")
METHODS = ("gi", "dae", "mean")
SWEEP_AXES = ("missing_rate", "ensemble", "lambda_mse", "hint_rate", "noise_std", "method")
# axes that need a separately trained imputer/predictor pair
TRAIN_AXES = tuple(a for a in SWEEP_AXES if a != "ensemble")
METRICS = ("accuracy", "rmse", "rmse_all", "ece")


@dataclass
class ExperimentConfig:
    """Everything that determines a sweep; persisted verbatim next to the results.

    ``sweep`` maps axis names from :data:`SWEEP_AXES` to value lists. Each
    combination of the training axes is one trained pipeline per replicate;
    ``ensemble`` values are evaluated on that pipeline without retraining.
    Replicate ``r`` uses seed ``seed + r`` and mask salt ``salt + r``.
    """
    dataset: str = "landsat"
    schema: str | None = None
    normalization: str | None = None
    missingness: dict = field(default_factory=lambda: {"mechanism": "uniform", "rate": 0.4})
    method: str = "gi"
    imputer: dict = field(default_factory=dict)
    imputer_train: dict = field(default_factory=dict)
    dae_train: dict = field(default_factory=dict)
    predictor_train: dict = field(default_factory=dict)
    ensemble: int = predictor.DEFAULT_ENSEMBLE
    bins: int = 10
    sweep: dict = field(default_factory=dict)
    replicates: int = 1
    seed: int = 0
    out: str = "results"
    jobs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        unknown = set(self.sweep) - set(SWEEP_AXES)
        if unknown:
            raise ValueError(f"unknown sweep axes {sorted(unknown)}; choose from {SWEEP_AXES}")
        for axis, values in self.sweep.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise ValueError(f"sweep axis {axis!r} needs a non-empty list")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


def config_hash(cfg):
    """SHA-256 of the canonical JSON config, ignoring output location and worker count."""
    d = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else dict(cfg)
    d.pop("out", None)
    d.pop("jobs", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# -- datasets ----------------------------------------------------------------

def resolve_dataset(name, schema=None):
    """Return ``(csv_path, schema_path)`` for a dataset reference.

    ``landsat`` resolves inside ``$GENIMPUTE_DATA_DIR`` (default ``data``);
    any other reference is a CSV path whose schema defaults to the sibling
    ``<stem>.schema.json``.
    """
    if name == "landsat":
        path = os.path.join(os.environ.get(DATA_DIR_ENV, "data"), "landsat.csv")
    else:
        path = name
    schema = schema or os.path.splitext(path)[0] + ".schema.json"
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset {name!r} not found at {path}")
    if not os.path.exists(schema):
        raise FileNotFoundError(f"schema for {name!r} not found at {schema}")
    return path, schema


@functools.lru_cache(maxsize=4)
def load_dataset(name, schema=None, normalization=None, seed=0):
    """Load and preprocess a dataset; normalization stats come from training rows."""
    if name == "four_gaussians":
        return data.normalize(data.make_four_gaussians(seed=seed), normalization or "unity")
    if name == "gaussian_1d":
        ds = data.make_gaussian_1d(seed=seed)
        return ds if normalization in (None, "none") else data.normalize(ds, normalization)
    path, schema_path = resolve_dataset(name, schema)
    sch = data.Schema.load(schema_path)
    ds = data.load_csv(path, sch)
    if sch.categorical:
        ds = data.encode_categorical(ds, rng_seed=seed)
    mode = normalization or sch.normalization
    return ds if mode == "none" else data.normalize(ds, mode)


def make_spec(missingness, rate=None, salt_offset=0):
    d = dict(missingness)
    if rate is not None:
        d["rate"] = rate
    d["salt"] = d.get("salt", 0) + salt_offset
    if d.get("mechanism") == "rectangular" and "alpha" not in d:
        return masking.MissingnessSpec.rectangular(d["rate"], tuple(d["grid"]), salt=d["salt"])
    return masking.MissingnessSpec.from_dict(d)


# -- imputers ----------------------------------------------------------------

def load_imputer(path):
    """Load any imputer checkpoint (GI, DAE or mean) by its stored kind."""
    _, _, meta = load_checkpoint(path)
    kind = meta.get("kind")
    cls = {"gi": imputer.ImputerModel, "dae": baselines.DaeImputer, "mean": baselines.MeanImputer}.get(kind)
    if cls is None:
        raise ValueError(f"{path} is not an imputer checkpoint (kind={kind!r})")
    return cls.load(path), meta


def train_method(method, ds, spec, cfg, seed, overrides=None):
    """Train the imputer for ``method``; returns ``(model, curve)``."""
    overrides = overrides or {}
    if method == "gi":
        model_kw = {**cfg.imputer}
        for axis, key in (("lambda_mse", "lambda_mse"), ("hint_rate", "hint_rate"),
                          ("noise_std", "training_noise_std")):
            if axis in overrides:
                model_kw[key] = overrides[axis]
        model, hist = imputer.train_imputer(ds, spec, imputer.ImputerTrainConfig(**cfg.imputer_train),
                                            imputer.ImputerConfig(**model_kw), seed=seed)
        return model, hist.epochs
    if method == "dae":
        return baselines.train_dae(ds, spec, baselines.DaeTrainConfig(**cfg.dae_train), seed=seed)
    if method == "mean":
        K = masking.make_masks(ds.X[ds.is_train], spec)
        return baselines.fit_mean(ds, K), []
    raise ValueError(f"unknown method {method!r}")


# -- one run -----------------------------------------------------------------

def expand(cfg):
    """Sweep points over the training axes (Cartesian product, config order)."""
    axes = [a for a in TRAIN_AXES if a in cfg.sweep]
    return [dict(zip(axes, combo)) for combo in itertools.product(*(cfg.sweep[a] for a in axes))]


def _finite(v):
    return v is None or (isinstance(v, float) and math.isfinite(v))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer, np.bool_)):
        return x.item()
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


def run_point(cfg_dict, point_index, point, replicate):
    """Train and evaluate one sweep point for one replicate.

    Returns one record per ensemble size. Failures are captured in the
    records rather than raised.
    """
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ensembles = list(cfg.sweep.get("ensemble", [cfg.ensemble]))
    method = point.get("method", cfg.method)
    seed = cfg.seed + replicate
    chash = config_hash(cfg)
    t0 = time.perf_counter()
    base = {"config_hash": chash, "point": point, "replicate": replicate, "seed": seed, "method": method}
    try:
        ds = load_dataset(cfg.dataset, cfg.schema, cfg.normalization)
        spec = make_spec(cfg.missingness, point.get("missing_rate"), replicate)
        G, imp_curve = train_method(method, ds, spec, cfg, seed, point)
        stochastic = method == "gi"
        F, pred_curve = predictor.train_predictor(G, ds, spec, predictor.PredictorTrainConfig(**cfg.predictor_train),
                                                  seed=seed, resample=stochastic)
        test = ~ds.is_train
        X, y = ds.X[test], ds.y[test]
        K = masking.make_masks(X, spec).astype(np.float64)
        X0 = imputer.fill_missing(X, K)
        rmse = rmse_all = None
        if (K == 0).any():
            Xhat = G.sample(X0, K, np.random.default_rng(seed))
            rmse = imputer.rmse_missing(X, Xhat, K)
            rmse_all = float(np.sqrt(np.mean((X - Xhat) ** 2)))  # observed entries contribute zero
        records = []
        for N in ensembles:
            n_eff = N if stochastic else 1
            res = predictor.evaluate(F, G, X0, K, y, N=n_eff, seed=seed)
            rel = predictor.reliability_from_arrays(res["psi"].max(axis=1), res["pred"] == y,
                                                    F.n_classes, cfg.bins)
            metrics = {"accuracy": res["accuracy"], "rmse": rmse, "rmse_all": rmse_all, "ece": rel.ece,
                       "ensemble_used": n_eff, "reliability": rel.to_dict()}
            if not all(_finite(metrics[m]) for m in METRICS):
                raise FloatingPointError(f"non-finite metrics {[metrics[m] for m in METRICS]}")
            records.append({**base, "point": {**point, "ensemble": N}, "status": "ok", "error": None,
                            "metrics": metrics})
        curves = {"imputer": imp_curve, "predictor": pred_curve}
    except Exception as exc:  # recorded per run, the sweep carries on
        log.exception("run failed: point %s replicate %d", point, replicate)
        err = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
        records = [{**base, "point": {**point, "ensemble": N}, "status": "failed", "error": err,
                    "metrics": None} for N in ensembles]
        curves = {}
    wall = time.perf_counter() - t0
    out = []
    for rec in records:
        rec["run_id"] = f"p{point_index:03d}-N{rec['point']['ensemble']}-r{replicate:02d}"
        rec["curves"] = curves
        rec["wall_time"] = wall
        out.append(_jsonable(rec))
    return out


# -- persistence -------------------------------------------------------------

def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
    os.replace(tmp, path)


def write_run(out_dir, rec):
    """Append-only per-run files: the JSON record and its reliability CSV."""
    _write_json(os.path.join(out_dir, "runs", f"{rec['run_id']}.json"), rec)
    if rec["status"] == "ok":
        r = rec["metrics"]["reliability"]
        edges = np.asarray(r["edges"])
        rep = predictor.ReliabilityReport(edges, np.array(r["mean_certainty"], dtype=float),
                                          np.array(r["mean_accuracy"], dtype=float), np.array(r["counts"]),
                                          r["ece"])
        rep.write_csv(os.path.join(out_dir, "reliability", f"{rec['run_id']}.csv"))


def point_key(point):
    return json.dumps(point, sort_keys=True)


def aggregate(records):
    """Mean and sample standard deviation (ddof=1) per sweep point."""
    groups = {}
    for rec in records:
        groups.setdefault(point_key(rec["point"]), []).append(rec)
    rows = []
    for key in sorted(groups):
        recs = groups[key]
        ok = [r for r in recs if r["status"] == "ok"]
        row = {"point": json.loads(key), "method": recs[0]["method"], "n": len(ok), "failed": len(recs) - len(ok)}
        for m in METRICS:
            vals = np.array([r["metrics"][m] for r in ok if r["metrics"].get(m) is not None], dtype=float)
            row[f"{m}_mean"] = float(vals.mean()) if vals.size else None
            row[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else None
        rows.append(row)
    return rows


def _fmt(mean, std, scale=1.0, digits=1):
    if mean is None:
        return ""
    if std is None:
        return f"{mean * scale:.{digits}f}"
    return f"{mean * scale:.{digits}f} ± {std * scale:.{digits}f}"


def write_summary(out_dir, rows):
    _write_json(os.path.join(out_dir, "summary.json"), rows)
    axes = sorted({a for r in rows for a in r["point"]} - {"method"})
    cols = ["method", *axes, "n", "failed"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["accuracy_pct"])
        for r in rows:
            vals = [r["method"], *[r["point"].get(a, "") for a in axes], r["n"], r["failed"]]
            vals += ["" if r[c] is None else repr(r[c]) for c in cols[len(axes) + 3:]]
            w.writerow(vals + [_fmt(r["accuracy_mean"], r["accuracy_std"], 100.0)])


def run_experiment(cfg, progress=None):
    """Run every sweep point for every replicate and persist the results.

    Layout under ``cfg.out``: ``config.json`` (verbatim), ``runs/<run_id>.json``,
    ``reliability/<run_id>.csv``, plus the deterministic merges
    ``results.json``, ``summary.json`` and ``summary.csv``.

    Returns
    -------
    records : list of dict
        Sorted by run id.
    """
    out = cfg.out
    for sub in ("runs", "reliability"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    cfg_dict = cfg.to_dict()
    _write_json(os.path.join(out, "config.json"), {**cfg_dict, "config_hash": config_hash(cfg)})
    tasks = [(cfg_dict, i, p, r) for i, p in enumerate(expand(cfg)) for r in range(cfg.replicates)]
    records = []

    def collect(recs):
        for rec in recs:
            write_run(out, rec)
            records.append(rec)
            if progress:
                progress(rec)

    if cfg.jobs == 1:
        for t in tasks:
            collect(run_point(*t))
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for recs in pool.map(run_point, *zip(*tasks)):
                collect(recs)
    records.sort(key=lambda r: r["run_id"])
    _write_json(os.path.join(out, "results.json"), records)
    write_summary(out, aggregate(records))
    return records


def load_records(out_dir):
    """Re-read the per-run files of a finished or interrupted sweep."""
    run_dir = os.path.join(out_dir, "runs")
    recs = []
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".json"):
            with open(os.path.join(run_dir, name)) as fh:
                recs.append(json.load(fh))
    return recs
