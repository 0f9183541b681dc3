"""``genimpute`` command line: training, evaluation, imputation, demos and sweeps."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import baselines, data, imputer, masking, predictor
from .experiment import (ExperimentConfig, config_hash, load_dataset, load_imputer, make_spec,
                         run_experiment, train_method, _jsonable, _write_json)

log = logging.getLogger("genimpute")

PROBE_X2 = 0.1


# -- synthetic demo ------------------------------------------------------------

def conditional_x1(n, x2=PROBE_X2, std=0.1, seed=0):
    """Exact draws of ``x1 | x2`` from the 4-Gaussian mixture by rejection.

    A component is proposed uniformly together with its ``x1``; the draw is
    kept with probability proportional to that component's density at ``x2``.
    """
    rng = np.random.default_rng(seed)
    v = data.SQUARE_VERTICES
    w = np.exp(-0.5 * ((x2 - v[:, 1]) / std) ** 2)
    accept_p = w / w.max()
    out = []
    while len(out) < n:
        c = rng.integers(0, len(v), size=2 * n)
        x1 = rng.normal(v[c, 0], std)
        keep = rng.random(2 * n) < accept_p[c]
        out.extend(x1[keep].tolist())
    return np.asarray(out[:n])


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def synth_demo(seed=0, out_dir="synth_demo", n_samples=1000, n_truth=10_000, missing_rate=0.5,
               gi_epochs=500, dae_epochs=None, ensemble=predictor.DEFAULT_ENSEMBLE):
    """Write the four panels of the 4-Gaussian conditional-distribution demo.

    Panels (CSV, raw units): ``panel_a_data`` mixture samples,
    ``panel_b_truth`` exact conditional draws of ``x1`` at ``x2 = 0.1``,
    ``panel_c_gi`` generative imputations with ``panel_c_psi`` the predicted
    class distribution, ``panel_d_dae`` autoencoder imputations. A
    ``summary.json`` records the mode masses of every panel.

    Returns
    -------
    dict
        The summary that was written.
    """
    os.makedirs(out_dir, exist_ok=True)
    raw = data.make_four_gaussians(seed=seed)
    ds = data.normalize(raw, "unity")
    stats = ds.stats["normalization"]
    spec = masking.MissingnessSpec("uniform", missing_rate, salt=seed)

    comp = raw.stats["component"]
    _write_rows(os.path.join(out_dir, "panel_a_data.csv"), ["x1", "x2", "label", "component"],
                [(x[0], x[1], int(y), int(c)) for x, y, c in zip(raw.X, raw.y, comp)])

    truth = conditional_x1(n_truth, seed=seed)
    _write_rows(os.path.join(out_dir, "panel_b_truth.csv"), ["x1"], [(v,) for v in truth])

    probe = (np.array([0.0, PROBE_X2]) - stats["shift"]) / stats["scale"]
    X0 = np.tile([0.0, probe[1]], (n_samples, 1))
    K = np.tile([0.0, 1.0], (n_samples, 1))

    gi_cfg = ExperimentConfig(dataset="four_gaussians", imputer={"hidden_act": "relu"},
                              imputer_train={"epochs": gi_epochs})
    G, _ = train_method("gi", ds, spec, gi_cfg, seed)
    gi_x1 = data.denormalize(stats, G.sample(X0, K, np.random.default_rng(seed)))[:, 0]
    _write_rows(os.path.join(out_dir, "panel_c_gi.csv"), ["x1"], [(v,) for v in gi_x1])
    F, _ = predictor.train_predictor(G, ds, spec, seed=seed)
    psi = predictor.estimate_targets(F, G, X0[:1], K[:1], N=ensemble, seed=seed)[0]
    _write_rows(os.path.join(out_dir, "panel_c_psi.csv"), ["class", "psi"],
                [(raw.class_names[j], p) for j, p in enumerate(psi)])

    dae_cfg = {} if dae_epochs is None else {"epochs": dae_epochs}
    dae, _ = baselines.train_dae(ds, spec, baselines.DaeTrainConfig(**dae_cfg), seed=seed)
    dae_x1 = data.denormalize(stats, dae.sample(X0, K))[:, 0]
    _write_rows(os.path.join(out_dir, "panel_d_dae.csv"), ["x1"], [(v,) for v in dae_x1])

    def masses(x):
        return {"near_0": float(np.mean(np.abs(x) < 0.25)), "near_1": float(np.mean(np.abs(x - 1) < 0.25)),
                "near_half": float(np.mean(np.abs(x - 0.5) < 0.25)), "mean": float(x.mean()),
                "std": float(x.std())}

    summary = {"seed": seed, "probe_x2": PROBE_X2, "missing_rate": missing_rate,
               "truth": masses(truth), "gi": masses(gi_x1), "dae": masses(dae_x1),
               "psi": psi.tolist(), "ensemble": ensemble}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


# -- mask calibration ---------------------------------------------------------

def mask_calibrate(rates, grid, out, draws=masking.CALIBRATION_DRAWS, seed=masking.CALIBRATION_SEED):
    """Calibrate rectangular-mask Beta parameters for each rate and write the table.

    Unreachable rates are kept as rows with ``reachable`` false and the
    solver's message in ``note``. ``.json`` outputs hold a list of rows,
    anything else is CSV.
    """
    rows = []
    for r in rates:
        if not 0.0 < r < 1.0:
            raise ValueError(f"rates must lie in (0, 1), got {r}")
        try:
            cal = masking.calibrate_beta(r, tuple(grid), draws=draws, seed=seed)
            rows.append({"rate": r, "alpha": cal.alpha, "beta": cal.beta, "invert": cal.invert,
                         "achieved": cal.achieved, "reachable": True, "note": ""})
        except ValueError as exc:
            rows.append({"rate": r, "alpha": None, "beta": None, "invert": r > 0.5,
                         "achieved": None, "reachable": False, "note": str(exc)})
    if str(out).endswith(".json"):
        _write_json(out, {"grid": list(grid), "draws": draws, "seed": seed, "rows": rows})
    else:
        keys = list(rows[0])
        _write_rows(out, keys, [["" if row[k] is None else row[k] for k in keys] for row in rows])
    return rows


# -- subcommands ------------------------------------------------------------------

def build_config(args):
    cfg = ExperimentConfig.load(args.config).to_dict() if args.config else {}
    for key in ("dataset", "schema", "normalization", "method", "ensemble", "seed", "jobs", "replicates"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    miss = dict(cfg.get("missingness", ExperimentConfig().missingness))
    if getattr(args, "missing_rate", None) is not None:
        miss["rate"] = args.missing_rate
    if getattr(args, "mechanism", None) is not None:
        miss["mechanism"] = args.mechanism
    if getattr(args, "grid", None) is not None:
        miss["grid"] = list(args.grid)
    cfg["missingness"] = miss
    model = dict(cfg.get("imputer", {}))
    for flag, key in (("lambda_mse", "lambda_mse"), ("hint_rate", "hint_rate"), ("noise_std", "training_noise_std")):
        if getattr(args, flag, None) is not None:
            model[key] = getattr(args, flag)
    cfg["imputer"] = model
    if getattr(args, "epochs", None) is not None:
        cfg["imputer_train"] = {**cfg.get("imputer_train", {}), "epochs": args.epochs}
    if getattr(args, "out", None) is not None and args.command == "sweep":
        cfg["out"] = args.out
    return ExperimentConfig.from_dict(cfg)


def _pipeline_meta(cfg, ds, spec):
    return {"dataset": cfg.dataset, "schema": cfg.schema, "normalization": cfg.normalization,
            "spec": spec.to_dict(), "seed": cfg.seed, "experiment": cfg.to_dict(),
            "columns": [c.name for c in ds.columns], "kinds": [c.kind for c in ds.columns],
            "stats": ds.stats.get("normalization"), "class_names": ds.class_names}


def _context(meta):
    ds = load_dataset(meta["dataset"], meta.get("schema"), meta.get("normalization"))
    return ds, masking.MissingnessSpec.from_dict(meta["spec"])


def cmd_train_imputer(args):
    cfg = build_config(args)
    ds = load_dataset(cfg.dataset, cfg.schema, cfg.normalization)
    spec = make_spec(cfg.missingness)
    model, curve = train_method(cfg.method, ds, spec, cfg, cfg.seed)
    out = args.out or f"{cfg.method}_imputer.npz"
    model.save(out, meta=_pipeline_meta(cfg, ds, spec))
    _write_json(os.path.splitext(out)[0] + ".history.json", _jsonable(curve))
    print(f"saved {cfg.method} imputer to {out}")
    return 0


def cmd_train_predictor(args):
    G, meta = load_imputer(args.imputer)
    cfg = ExperimentConfig.from_dict(meta["experiment"])
    seed = cfg.seed if args.seed is None else args.seed
    ds, spec = _context(meta)
    F, hist = predictor.train_predictor(G, ds, spec, predictor.PredictorTrainConfig(**cfg.predictor_train),
                                        seed=seed, resample=meta["kind"] == "gi")
    out = args.out or "predictor.npz"
    F.save(out, meta={"imputer": os.path.abspath(args.imputer), "seed": seed})
    _write_json(os.path.splitext(out)[0] + ".history.json", _jsonable(hist))
    print(f"saved predictor to {out} after {len(hist)} epochs")
    return 0


def cmd_evaluate(args):
    G, meta = load_imputer(args.imputer)
    F = predictor.PredictorModel.load(args.predictor)
    ds, spec = _context(meta)
    seed = meta["seed"] if args.seed is None else args.seed
    test = ~ds.is_train
    X, y = ds.X[test], ds.y[test]
    K = masking.make_masks(X, spec).astype(np.float64)
    X0 = imputer.fill_missing(X, K)
    N = args.ensemble if meta["kind"] == "gi" else 1
    res = predictor.evaluate(F, G, X0, K, y, N=N, seed=seed)
    rel = predictor.reliability_from_arrays(res["psi"].max(axis=1), res["pred"] == y, F.n_classes)
    rmse = imputer.rmse_missing(X, G.sample(X0, K, np.random.default_rng(seed)), K) if (K == 0).any() else None
    result = {"accuracy": res["accuracy"], "rmse": rmse, "ece": rel.ece, "ensemble": N, "n_test": int(len(y))}
    print(json.dumps(_jsonable(result)))
    if args.report:
        out = args.out or "report"
        os.makedirs(out, exist_ok=True)
        rel.write_csv(os.path.join(out, "reliability.csv"))
        _write_json(os.path.join(out, "evaluation.json"), _jsonable({**result, "reliability": rel.to_dict()}))
        _write_rows(os.path.join(out, "psi.csv"), ["label", "pred", *[f"psi_{c}" for c in ds.class_names]],
                    [(int(t), int(p), *row) for t, p, row in zip(y, res["pred"], res["psi"])])
    return 0


def read_incomplete_csv(path, columns):
    """Rows of raw feature values; empty, ``nan`` or ``?`` fields are missing."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != columns:
            raise ValueError(f"{path}: header must list the feature columns {columns}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if len(rec) != len(columns):
                raise ValueError(f"{path}:{line}: expected {len(columns)} fields")
            rows.append([np.nan if v.strip().lower() in ("", "nan", "?") else float(v) for v in rec])
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(columns))


def cmd_impute(args):
    G, meta = load_imputer(args.imputer)
    columns, stats = meta["columns"], meta.get("stats")
    cols = [data.Column(n, k) for n, k in zip(columns, meta["kinds"])]
    raw = read_incomplete_csv(args.input, columns)
    K = (~np.isnan(raw)).astype(np.float64)
    X = raw.copy()
    if stats:
        cont = np.array([c.kind == "continuous" for c in cols])
        X[:, cont] = (X[:, cont] - np.asarray(stats["shift"])) / np.asarray(stats["scale"])
    X0 = imputer.fill_missing(X, K)
    rng = np.random.default_rng(meta["seed"] if args.seed is None else args.seed)
    out_rows = []
    for s in range(args.samples):
        Xi = G.sample(X0, K, rng)
        if stats:
            Xi = data.denormalize(stats, Xi, cols)
        Xi = np.where(K == 1, raw, Xi)  # observed values are echoed verbatim
        out_rows.extend((i, s, *row) for i, row in enumerate(Xi))
    out_rows.sort(key=lambda r: (r[0], r[1]))
    _write_rows(args.out or "imputed.csv", ["row", "sample", *columns], out_rows)
    return 0


def cmd_synth_demo(args):
    kw = {} if args.epochs is None else {"gi_epochs": args.epochs}
    summary = synth_demo(seed=args.seed or 0, out_dir=args.out or "synth_demo", **kw)
    print(json.dumps(summary, indent=1))
    return 0


def cmd_mask_calibrate(args):
    rows = mask_calibrate(args.rates, args.grid, args.out or "mask_calibration.csv",
                          **({} if args.seed is None else {"seed": args.seed}))
    for r in rows:
        flag = "" if r["reachable"] else "  UNREACHABLE"
        print(f"rate {r['rate']:.2f}: alpha={r['alpha']} beta={r['beta']} invert={r['invert']} "
              f"achieved={r['achieved']}{flag}")
    return 0


def cmd_sweep(args):
    cfg = build_config(args)
    print(f"sweep {config_hash(cfg)[:12]} -> {cfg.out}")

    def progress(rec):
        m = rec["metrics"]
        tail = f"acc={m['accuracy']:.4f} ece={m['ece']:.4f}" if m else rec["error"].splitlines()[0]
        print(f"  {rec['run_id']} {rec['status']} {tail}", flush=True)

    records = run_experiment(cfg, progress)
    failed = sum(r["status"] != "ok" for r in records)
    print(f"{len(records) - failed}/{len(records)} runs ok; summary in {os.path.join(cfg.out, 'summary.csv')}")
    return 1 if failed else 0


def make_parser():
    p = argparse.ArgumentParser(prog="genimpute", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--jobs", type=int)

    def pipeline(sp):
        sp.add_argument("--dataset", help="landsat, four_gaussians, gaussian_1d or a CSV path")
        sp.add_argument("--schema")
        sp.add_argument("--normalization", choices=["statistical", "unity", "none"])
        sp.add_argument("--missing-rate", type=float)

    sp = sub.add_parser("train-imputer", help="train a GI, DAE or mean imputer")
    common(sp, "checkpoint path")
    pipeline(sp)
    sp.add_argument("--method", choices=["gi", "dae", "mean"])
    sp.add_argument("--mechanism", choices=["uniform", "rectangular"])
    sp.add_argument("--grid", type=int, nargs=2, help="feature grid shape for rectangular masks")
    sp.add_argument("--lambda-mse", type=float)
    sp.add_argument("--hint-rate", type=float)
    sp.add_argument("--noise-std", type=float, help="training noise std")
    sp.add_argument("--epochs", type=int, help="GI training epochs")
    sp.set_defaults(func=cmd_train_imputer)

    sp = sub.add_parser("train-predictor", help="train a classifier on imputed data")
    common(sp, "checkpoint path")
    sp.add_argument("--imputer", required=True)
    sp.set_defaults(func=cmd_train_predictor)

    sp = sub.add_parser("evaluate", help="ensemble accuracy, RMSE and calibration on the test split")
    common(sp, "report directory")
    sp.add_argument("--imputer", required=True)
    sp.add_argument("--predictor", required=True)
    sp.add_argument("--ensemble", type=int, default=predictor.DEFAULT_ENSEMBLE)
    sp.add_argument("--report", action="store_true", help="write reliability and per-row target CSVs")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("impute", help="draw imputations for rows of a CSV")
    common(sp, "output CSV")
    sp.add_argument("--imputer", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--samples", type=int, default=1)
    sp.set_defaults(func=cmd_impute)

    sp = sub.add_parser("synth-demo", help="4-Gaussian conditional-distribution panels")
    common(sp, "output directory")
    sp.add_argument("--epochs", type=int, help="GI training epochs")
    sp.set_defaults(func=cmd_synth_demo)

    sp = sub.add_parser("mask-calibrate", help="rectangular-mask Beta calibration table")
    common(sp, "table path (.csv or .json)")
    sp.add_argument("--rates", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8])
    sp.add_argument("--grid", type=int, nargs=2, default=[32, 32])
    sp.set_defaults(func=cmd_mask_calibrate)

    sp = sub.add_parser("sweep", help="run an experiment config over its sweep axes and replicates")
    common(sp, "results directory")
    pipeline(sp)
    sp.add_argument("--method", choices=["gi", "dae", "mean"])
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--ensemble", type=int)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"genimpute {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
