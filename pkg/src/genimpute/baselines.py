"""Deterministic reference imputers: feature means and a masked denoising autoencoder.

Both expose ``sample(X0, K, rng)`` like the adversarial imputer so the
predictor pipeline can use them unchanged; ``rng`` is ignored.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import masking
from .imputer import DivergenceError, blend, fill_missing
from .nn import Adam, DenseNet, LrSchedule, load_checkpoint, mlp_spec, save_checkpoint


class MeanImputer:
    """Fills every missing entry with the mean of that feature's observed training values."""

    def __init__(self, means, names=None):
        self.means = np.asarray(means, dtype=np.float64)
        self.names = names
        self.d = self.means.size

    def sample(self, X0, K, rng=None):
        X0 = np.asarray(X0, dtype=np.float64)
        if X0.shape[-1] != self.d:
            raise ValueError(f"expected {self.d} features, got {X0.shape[-1]}")
        return blend(X0, np.asarray(K), np.broadcast_to(self.means, X0.shape))

    def save(self, path, meta=None):
        save_checkpoint(path, {}, meta={"kind": "mean", "d": self.d, "means": self.means.tolist(),
                                        "names": self.names, **(meta or {})})

    @classmethod
    def load(cls, path):
        _, _, meta = load_checkpoint(path)
        return cls(meta["means"], meta.get("names"))


def fit_mean(ds, masks):
    """Per-feature means over observed training entries.

    ``masks`` covers the training rows of ``ds`` (or all rows, in which case
    the training rows are selected).
    """
    X = ds.X[ds.is_train]
    K = np.asarray(masks)
    if K.shape[0] == ds.n and ds.n != X.shape[0]:
        K = K[ds.is_train]
    if K.shape != X.shape:
        raise ValueError(f"mask shape {K.shape} does not match training data {X.shape}")
    counts = K.sum(axis=0)
    names = [c.name for c in ds.columns] if ds.columns else [str(j) for j in range(X.shape[1])]
    never = [names[j] for j in np.flatnonzero(counts == 0)]
    if never:
        raise ValueError(f"features never observed in training: {never}")
    means = np.where(K == 1, X, 0.0).sum(axis=0) / counts
    return MeanImputer(means, names)


@dataclass
class DaeTrainConfig:
    hidden: tuple = (64, 64, 64)
    hidden_act: str = "sigmoid"
    batchnorm: bool = True
    corruption: float = 0.25
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 100
    decay_factor: float = 5.0
    patience: int = 10
    tol: float = 1e-4
    max_decays: int = 2
    validation_fraction: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0.0 <= self.corruption < 1.0:
            raise ValueError("corruption must lie in [0, 1)")


class DaeImputer:
    """Autoencoder over ``[x0, k]`` with a Tanh reconstruction head of width ``d``."""

    def __init__(self, d, cfg=None, seed=0, net=None):
        self.d = int(d)
        cfg = cfg or DaeTrainConfig()
        self.net = net or DenseNet(mlp_spec(2 * self.d, cfg.hidden, self.d, cfg.hidden_act, "tanh", cfg.batchnorm),
                                   rng=seed)

    def reconstruct(self, X0, K, training=False):
        return self.net.forward(np.hstack([X0, K]), training=training)

    def sample(self, X0, K, rng=None):
        X0 = np.asarray(X0, dtype=np.float64)
        K = np.asarray(K, dtype=np.float64)
        if X0.shape[-1] != self.d or X0.shape != K.shape:
            raise ValueError(f"expected matching [n, {self.d}] arrays")
        return blend(X0, K, self.reconstruct(fill_missing(X0, K), K))

    def save(self, path, meta=None):
        save_checkpoint(path, {"AE": self.net}, meta={"kind": "dae", "d": self.d, **(meta or {})})

    @classmethod
    def load(cls, path):
        nets, _, meta = load_checkpoint(path)
        return cls(meta["d"], net=nets["AE"])


def masked_mse(recon, x, k):
    """MSE over observed entries and its gradient (exactly zero at missing entries)."""
    n_obs = k.sum()
    if not n_obs:
        return 0.0, np.zeros_like(recon)
    diff = k * (recon - x)
    return float((diff ** 2).sum() / n_obs), 2.0 * diff / n_obs


def train_dae(ds, spec, cfg=None, seed=0, masks=None):
    """Fit a :class:`DaeImputer` on the training rows of ``ds``.

    Each batch additionally hides a ``corruption`` fraction of the observed
    entries from the input; the loss covers every observed entry, so the
    network learns to fill in what it cannot see.

    Returns
    -------
    model : DaeImputer
    history : list of dict
    """
    cfg = cfg or DaeTrainConfig()
    X = ds.X[ds.is_train]
    K = (masking.make_masks(X, spec) if masks is None else np.asarray(masks)).astype(np.float64)
    X0 = fill_missing(X, K)
    n, d = X.shape
    ss = np.random.SeedSequence(seed)
    init_seed, split_seed, shuffle_seed, drop_seed = ss.spawn(4)
    model = DaeImputer(d, cfg, seed=np.random.default_rng(init_seed))
    n_val = int(round(n * cfg.validation_fraction))
    perm = np.random.default_rng(split_seed).permutation(n)
    val_rows, tr_rows = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    rng_shuffle = np.random.default_rng(shuffle_seed)
    rng_drop = np.random.default_rng(drop_seed)
    # validation: hide a fixed corruption pattern and score the hidden entries
    Kv = K[val_rows]
    hide = np.random.default_rng(split_seed).random(Kv.shape) < max(cfg.corruption, 0.1)
    Kv_in = Kv * ~hide
    opt = Adam(model.net, cfg.lr, cfg.beta1, cfg.beta2)
    sched = LrSchedule(cfg.lr, cfg.decay_factor, cfg.patience, cfg.tol)
    best = (math.inf, model.net.state_dict())
    history = []
    m = len(tr_rows)
    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(m)
        total, n_batches = 0.0, 0
        for start in range(0, m, cfg.batch_size):
            idx = tr_rows[order[start:start + cfg.batch_size]]
            if idx.size < 2:
                continue
            k = K[idx]
            k_in = k * (rng_drop.random(k.shape) >= cfg.corruption)
            recon = model.reconstruct(X0[idx] * k_in, k_in, training=True)
            loss, g = masked_mse(recon, X0[idx], k)
            if not math.isfinite(loss):
                model.net.load_state_dict(best[1])
                raise DivergenceError(f"non-finite DAE loss at epoch {epoch}", model, history)
            model.net.backward(g)
            opt.step()
            total += loss
            n_batches += 1
        entry = {"epoch": epoch, "loss": total / max(n_batches, 1), "lr": opt.lr}
        if n_val and (Kv * hide).any():
            recon = model.reconstruct(X0[val_rows] * Kv_in, Kv_in)
            entry["val_loss"], _ = masked_mse(recon, X0[val_rows], Kv * hide)
            if entry["val_loss"] < best[0]:
                best = (entry["val_loss"], model.net.state_dict())
            before = sched.n_decays
            opt.lr = sched.step(entry["val_loss"])
            history.append(entry)
            if before == cfg.max_decays and sched.n_decays > before:
                break
        else:
            history.append(entry)
    if n_val and math.isfinite(best[0]):
        model.net.load_state_dict(best[1])
    return model, history


def impute_baseline(model, sample):
    """Deterministic imputation of one :class:`~genimpute.data.MaskedSample`."""
    x = np.asarray(sample.x, dtype=np.float64)
    k = np.asarray(sample.k)
    if x.shape != (model.d,) or k.shape != (model.d,):
        raise ValueError(f"expected vectors of length {model.d}, got {x.shape} and {k.shape}")
    out = model.sample(fill_missing(x, k)[None, :], k[None, :].astype(np.float64))[0]
    return np.where(k == 1, x, out)


def config_dict(cfg):
    return asdict(cfg)
