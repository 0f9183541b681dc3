"""Stochastic predictor: training on re-imputed data and Monte Carlo target estimation.

Anything with a ``sample(X0, K, rng)`` method that returns blended
imputations can feed the predictor. That covers :class:`ImputerModel` as
well as the deterministic baselines, which ignore ``rng``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import masking
from .imputer import CLAMP, DivergenceError, fill_missing, rmse_missing  # noqa: F401
from .nn import Adam, DenseNet, LrSchedule, load_checkpoint, mlp_spec, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_ENSEMBLE = 128


@dataclass
class PredictorTrainConfig:
    hidden: tuple = (64, 64)
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 100
    decay_factor: float = 5.0
    patience: int = 10
    tol: float = 1e-4
    max_decays: int = 2
    validation_fraction: float = 0.1
    restore: str = "val_acc"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.restore not in ("val_loss", "val_acc", "last"):
            raise ValueError("restore must be 'val_loss', 'val_acc' or 'last'")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


class PredictorModel:
    """Softmax classifier over ``d`` features and ``c`` classes."""

    def __init__(self, d, n_classes, hidden=(64, 64), seed=0, net=None):
        self.d = int(d)
        self.n_classes = int(n_classes)
        self.net = net or DenseNet(mlp_spec(self.d, hidden, self.n_classes, "relu", "softmax"), rng=seed)

    def predict_proba(self, X):
        return self.net.forward(np.atleast_2d(X), training=False)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def save(self, path, meta=None):
        save_checkpoint(path, {"F": self.net},
                        meta={"kind": "predictor", "d": self.d, "n_classes": self.n_classes, **(meta or {})})

    @classmethod
    def load(cls, path):
        nets, _, meta = load_checkpoint(path)
        return cls(meta["d"], meta["n_classes"], net=nets["F"])


class CompleteData:
    """Pass-through imputer for fully observed inputs (plain supervised training)."""

    def sample(self, X0, K, rng):
        return np.asarray(X0, dtype=np.float64)


def cross_entropy(p, y):
    """Mean negative log-likelihood and its gradient w.r.t. the softmax output."""
    rows = np.arange(len(y))
    q = np.maximum(p[rows, y], CLAMP)
    g = np.zeros_like(p)
    g[rows, y] = -1.0 / (q * len(y))
    return float(-np.log(q).mean()), g


def train_predictor(imputer, ds, spec=None, cfg=None, seed=0, masks=None, resample=True, callback=None):
    """Train a classifier on imputed training rows.

    With ``resample=True`` every epoch re-imputes every training row with
    fresh generator noise before the mini-batch pass. With ``resample=False``
    the rows are imputed once, which is how the baseline predictors are
    trained. ``imputer=None`` trains on the complete features.

    A held-out slice of the training rows (imputed once) drives the plateau
    schedule; training stops after the rate has been divided ``max_decays``
    times and the loss plateaus again. The best held-out checkpoint is
    restored at the end.

    Returns
    -------
    model : PredictorModel
    history : list of dict
    """
    cfg = cfg or PredictorTrainConfig()
    imputer = imputer or CompleteData()
    X = ds.X[ds.is_train]
    y = ds.y[ds.is_train]
    if masks is None:
        K = masking.make_masks(X, spec) if spec is not None else np.ones_like(X)
    else:
        K = np.asarray(masks)
    K = K.astype(np.float64)
    X0 = fill_missing(X, K)
    n, d = X.shape
    ss = np.random.SeedSequence(seed)
    init_seed, split_seed, shuffle_seed, z_seed, val_seed = ss.spawn(5)
    model = PredictorModel(d, ds.n_classes, cfg.hidden, seed=np.random.default_rng(init_seed))

    n_val = int(round(n * cfg.validation_fraction))
    perm = np.random.default_rng(split_seed).permutation(n)
    val_rows, tr_rows = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    X0t, Kt, yt = X0[tr_rows], K[tr_rows], y[tr_rows]
    Xv = imputer.sample(X0[val_rows], K[val_rows], np.random.default_rng(val_seed)) if n_val else None
    yv = y[val_rows]

    rng_shuffle = np.random.default_rng(shuffle_seed)
    rng_z = np.random.default_rng(z_seed)
    opt = Adam(model.net, cfg.lr, cfg.beta1, cfg.beta2)
    sched = LrSchedule(cfg.lr, cfg.decay_factor, cfg.patience, cfg.tol)
    best = (math.inf, model.net.state_dict())
    history = []
    Xt = None
    m = len(tr_rows)
    for epoch in range(cfg.epochs):
        if resample or Xt is None:
            Xt = imputer.sample(X0t, Kt, rng_z)
        order = rng_shuffle.permutation(m)
        total = 0.0
        n_batches = 0
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            p = model.net.forward(Xt[idx], training=True)
            loss, g = cross_entropy(p, yt[idx])
            if not math.isfinite(loss):
                model.net.load_state_dict(best[1])
                raise DivergenceError(f"non-finite predictor loss at epoch {epoch}", model, history)
            model.net.backward(g)
            opt.step()
            total += loss
            n_batches += 1
        entry = {"epoch": epoch, "loss": total / max(n_batches, 1), "lr": opt.lr}
        if n_val:
            pv = model.predict_proba(Xv)
            entry["val_loss"], _ = cross_entropy(pv, yv)
            entry["val_acc"] = float(np.mean(pv.argmax(1) == yv))
            score = -entry["val_acc"] if cfg.restore == "val_acc" else entry["val_loss"]
            if score < best[0]:
                best = (score, model.net.state_dict())
        history.append(entry)
        if callback is not None and callback(epoch, model, entry):
            break
        if n_val:
            before = sched.n_decays
            opt.lr = sched.step(entry["val_loss"])
            if before == cfg.max_decays and sched.n_decays > before:
                break
    if n_val and cfg.restore != "last":
        model.net.load_state_dict(best[1])
    return model, history


# -- Monte Carlo target estimation ---------------------------------------------

@dataclass
class TargetDistribution:
    psi: np.ndarray
    n: int

    @property
    def certainty(self):
        return float(self.psi.max())

    @property
    def label(self):
        return int(np.argmax(self.psi))


def _votes(probs, soft):
    if soft:
        return probs
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    hard = np.zeros_like(probs)
    hard[np.arange(len(probs)), probs.argmax(axis=1)] = 1.0
    return hard


def estimate_targets(F, G, X, K, N=DEFAULT_ENSEMBLE, seed=0, soft=False, chunk=256):
    """Estimate the class distribution of every row from ``N`` imputations.

    Hard mode counts argmax votes, so each entry is a multiple of ``1/N``.
    Soft mode averages the softmax outputs instead.

    Returns
    -------
    psi : ndarray, shape [n, c]
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    if X.shape != K.shape:
        raise ValueError("X and K shapes differ")
    G = G or CompleteData()
    X0 = fill_missing(X, K)
    rng = np.random.default_rng(seed)
    psi = np.zeros((X.shape[0], F.n_classes))
    step = max(1, chunk)
    for start in range(0, X.shape[0], step):
        rows = slice(start, start + step)
        nb = X0[rows].shape[0]
        reps0 = np.repeat(X0[rows], N, axis=0)
        repsK = np.repeat(K[rows], N, axis=0)
        imp = G.sample(reps0, repsK, rng)
        votes = _votes(F.predict_proba(imp), soft).reshape(nb, N, -1)
        psi[rows] = votes.sum(axis=1) / N
    return psi


def estimate_target(F, G, sample, N=DEFAULT_ENSEMBLE, seed=0, soft=False):
    """Target distribution of a single :class:`~genimpute.data.MaskedSample`."""
    x = np.asarray(sample.x, dtype=np.float64)
    if x.shape != (F.d,):
        raise ValueError(f"expected a vector of length {F.d}, got {x.shape}")
    psi = estimate_targets(F, G, x[None, :], np.asarray(sample.k)[None, :], N, seed, soft)[0]
    return TargetDistribution(psi, N)


def predict_majority(F, G, sample, N=DEFAULT_ENSEMBLE, seed=0):
    return estimate_target(F, G, sample, N, seed).label


def evaluate(F, G, X, K, y, N=DEFAULT_ENSEMBLE, seed=0, soft=False):
    """Majority-vote accuracy plus the per-row target distributions."""
    psi = estimate_targets(F, G, X, K, N, seed, soft)
    pred = psi.argmax(axis=1)
    return {"accuracy": float(np.mean(pred == np.asarray(y))), "psi": psi, "pred": pred}


# -- calibration -------------------------------------------------------------

@dataclass
class ReliabilityReport:
    edges: np.ndarray
    mean_certainty: np.ndarray
    mean_accuracy: np.ndarray
    counts: np.ndarray
    ece: float
    empty: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.empty is None:
            self.empty = self.counts == 0

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def to_dict(self):
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in a]
        return {"edges": self.edges.tolist(), "mean_certainty": clean(self.mean_certainty),
                "mean_accuracy": clean(self.mean_accuracy), "counts": self.counts.tolist(),
                "empty": self.empty.tolist(), "ece": self.ece}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "mean_certainty", "mean_accuracy", "count"])
            for c, mc, ma, n in zip(self.centers, self.mean_certainty, self.mean_accuracy, self.counts):
                w.writerow([repr(float(c)), "" if n == 0 else repr(float(mc)),
                            "" if n == 0 else repr(float(ma)), int(n)])


def reliability_from_arrays(certainty, correct, n_classes, bins=10):
    """Bin certainties into ``bins`` equal-width bins over ``[1/c, 1]``.

    ECE is the count-weighted mean of ``|mean certainty - accuracy|``.
    Empty bins carry NaN statistics and are flagged in ``empty``.
    """
    certainty = np.asarray(certainty, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if certainty.shape != correct.shape or certainty.ndim != 1:
        raise ValueError("certainty and correct must be 1-D arrays of equal length")
    if certainty.size == 0:
        raise ValueError("empty evaluation set")
    lo = 1.0 / n_classes
    edges = np.linspace(lo, 1.0, bins + 1)
    which = np.clip(np.searchsorted(edges, certainty, side="right") - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    sum_c = np.bincount(which, weights=certainty, minlength=bins)
    sum_a = np.bincount(which, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mc = np.where(counts > 0, sum_c / counts, np.nan)
        ma = np.where(counts > 0, sum_a / counts, np.nan)
    filled = counts > 0
    ece = float(np.sum(counts[filled] * np.abs(mc[filled] - ma[filled])) / certainty.size)
    return ReliabilityReport(edges, mc, ma, counts, ece)


def reliability(F, G, X, K, y, N=DEFAULT_ENSEMBLE, bins=10, seed=0, soft=False):
    """Reliability report with certainty = max of the estimated target distribution."""
    psi = estimate_targets(F, G, X, K, N, seed, soft)
    correct = psi.argmax(axis=1) == np.asarray(y)
    return reliability_from_arrays(psi.max(axis=1), correct, F.n_classes, bins)


def noisy_label_accuracy(eps):
    """Expected accuracy of a noisy predictor scored against equally noisy labels."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    return (1.0 - eps) ** 2 + eps ** 2


def config_dict(cfg):
    return asdict(cfg)
