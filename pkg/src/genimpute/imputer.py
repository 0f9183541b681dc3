"""Adversarial generative imputer.

The generator maps ``[x, k, z]`` (missing entries of ``x`` zero-filled) to a
full feature vector through a Tanh head; its output only fills the missing
positions. The discriminator sees the blended vector (plus an optional hint)
and predicts, per entry, the probability that it was observed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import masking
from .nn import Adam, DenseNet, LrSchedule, load_checkpoint, mlp_spec, save_checkpoint

log = logging.getLogger(__name__)

TTUR_RATES = (0.001, 0.0005, 0.0001, 0.00005)
CLAMP = 1e-7
MONITORS = ("loss_d", "loss_g", "rmse_val", "none")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``model`` holds the last good state."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history or []


@dataclass
class ImputerConfig:
    hidden: tuple = (64, 64, 64)
    hidden_act: str = "sigmoid"
    batchnorm: bool = True
    lambda_mse: float = 0.0
    hint_rate: float = 0.0
    training_noise_std: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.lambda_mse < 0:
            raise ValueError("lambda_mse must be >= 0")
        if not 0.0 <= self.hint_rate <= 1.0:
            raise ValueError("hint_rate must lie in [0, 1]")
        if self.training_noise_std < 0:
            raise ValueError("training_noise_std must be >= 0")


@dataclass
class ImputerTrainConfig:
    lr_g: float = 0.0001
    lr_d: float = 0.0005
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 300
    pretrain_fraction: float = 0.05
    decay_factor: float = 5.0
    patience: int = 10
    tol: float = 1e-4
    max_decays: int = 3
    monitor: str = "none"
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.pretrain_fraction < 1.0:
            raise ValueError("pretrain_fraction must lie in [0, 1)")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {MONITORS}")

    @property
    def pretrain_epochs(self):
        return math.ceil(self.pretrain_fraction * self.epochs)


def noise_dim(d):
    return max(1, math.ceil(d / 8))


class ImputerModel:
    """Generator/discriminator pair plus the variant configuration."""

    def __init__(self, d, config=None, seed=0):
        self.d = int(d)
        self.config = config or ImputerConfig()
        self.d_z = noise_dim(self.d)
        c = self.config
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        g_seed, d_seed = ss.spawn(2)
        self.G = DenseNet(mlp_spec(2 * self.d + self.d_z, c.hidden, self.d, c.hidden_act, "tanh", c.batchnorm),
                          rng=np.random.default_rng(g_seed))
        d_in = 2 * self.d if c.hint_rate > 0 else self.d
        self.D = DenseNet(mlp_spec(d_in, c.hidden, self.d, c.hidden_act, "sigmoid", c.batchnorm),
                          rng=np.random.default_rng(d_seed))

    def generator_input(self, X0, K, Z):
        return np.hstack([X0, K, Z])

    def generate(self, X0, K, Z, training=False):
        return self.G.forward(self.generator_input(X0, K, Z), training=training)

    def sample(self, X0, K, rng):
        """One imputation per row with fresh ``z ~ N(0, I)`` drawn from ``rng``."""
        X0 = np.asarray(X0, dtype=np.float64)
        K = np.asarray(K, dtype=np.float64)
        Z = self.draw_z(rng, X0.shape[0])
        return blend(X0, K, self.generate(X0, K, Z))

    def draw_z(self, rng, n):
        return rng.standard_normal((n, self.d_z))

    def save(self, path, meta=None):
        save_checkpoint(path, {"G": self.G, "D": self.D},
                        meta={"kind": "gi", "d": self.d, "config": asdict(self.config), **(meta or {})})

    @classmethod
    def load(cls, path):
        nets, _, meta = load_checkpoint(path)
        model = cls.__new__(cls)
        model.d = meta["d"]
        model.config = ImputerConfig(**meta["config"])
        model.d_z = noise_dim(model.d)
        model.G, model.D = nets["G"], nets["D"]
        return model


# -- building blocks ---------------------------------------------------------

def fill_missing(x, k):
    """Zero-fill missing entries (sentinel or otherwise)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k)
    return np.where(k == 1, np.nan_to_num(x, nan=0.0), 0.0)


def blend(x, k, g_out):
    """Observed entries from ``x``, missing ones from ``g_out``."""
    x = np.asarray(x, dtype=np.float64)
    g_out = np.asarray(g_out, dtype=np.float64)
    k = np.asarray(k)
    if x.shape != k.shape or g_out.shape != x.shape:
        raise ValueError(f"blend shapes differ: x {x.shape}, k {k.shape}, g {g_out.shape}")
    return np.where(k == 1, x, g_out)


def _clamp(p):
    return np.clip(p, CLAMP, 1.0 - CLAMP)


def adversarial_loss(k, k_hat, scored=None):
    """Per-element cross-entropy losses ``(loss_D, loss_G_adv)``.

    ``loss_D`` averages the mask log-likelihood over all entries.
    ``loss_G_adv`` is the non-saturating generator loss ``-log k_hat``
    averaged over missing entries (0 when nothing is missing). ``scored``
    optionally restricts both averages to a subset of entries (entries the
    hint left unrevealed).
    """
    k = np.asarray(k, dtype=np.float64)
    p = _clamp(np.asarray(k_hat, dtype=np.float64))
    if not np.isfinite(p).all():
        raise ValueError("non-finite discriminator output")
    w = np.ones_like(k) if scored is None else np.asarray(scored, dtype=np.float64)
    n_scored = w.sum()
    ll = k * np.log(p) + (1.0 - k) * np.log(1.0 - p)
    loss_d = float(-(w * ll).sum() / n_scored) if n_scored else 0.0
    miss = w * (1.0 - k)
    n_miss = miss.sum()
    loss_g = float(-(miss * np.log(p)).sum() / n_miss) if n_miss else 0.0
    return loss_d, loss_g


def discriminator_grad(k, k_hat, scored=None):
    p = _clamp(k_hat)
    w = np.ones_like(k) if scored is None else scored
    n_scored = w.sum()
    if not n_scored:
        return np.zeros_like(p)
    return -w * (k / p - (1.0 - k) / (1.0 - p)) / n_scored


def generator_adv_grad(k, k_hat, scored=None):
    p = _clamp(k_hat)
    miss = 1.0 - k if scored is None else scored * (1.0 - k)
    n_miss = miss.sum()
    if not n_miss:
        return np.zeros_like(p)
    return -(miss / p) / n_miss


def mse_observed(k, x, g_out):
    k = np.asarray(k, dtype=np.float64)
    n_obs = k.sum()
    if not n_obs:
        return 0.0
    return float((k * (np.asarray(g_out) - np.asarray(x)) ** 2).sum() / n_obs)


def generator_loss(k, k_hat, x, g_out, lambda_mse=0.0):
    """Adversarial term on missing entries plus ``lambda_mse`` times the observed-entry MSE."""
    if lambda_mse < 0:
        raise ValueError("lambda_mse must be >= 0")
    _, adv = adversarial_loss(k, k_hat)
    if lambda_mse == 0:
        return adv
    return adv + lambda_mse * mse_observed(k, x, g_out)


def make_hint(k, hint_rate, rng, return_reveal=False):
    """Reveal each mask entry with probability ``hint_rate``; the rest read 0.5.

    With ``return_reveal`` the boolean reveal pattern is returned as well.
    """
    if not 0.0 <= hint_rate <= 1.0:
        raise ValueError("hint_rate must lie in [0, 1]")
    k = np.asarray(k, dtype=np.float64)
    reveal = rng.random(k.shape) < hint_rate
    hint = np.where(reveal, k, 0.5)
    return (hint, reveal) if return_reveal else hint


def rmse_missing(truth, imputed, mask):
    """Root mean squared error pooled over the missing entries only."""
    truth = np.asarray(truth, dtype=np.float64)
    imputed = np.asarray(imputed, dtype=np.float64)
    mask = np.asarray(mask)
    if truth.shape != imputed.shape or truth.shape != mask.shape:
        raise ValueError("rmse_missing shapes differ")
    miss = mask == 0
    if not miss.any():
        raise ValueError("no missing entries to score")
    return float(np.sqrt(np.mean((truth[miss] - imputed[miss]) ** 2)))


# -- training ----------------------------------------------------------------

@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def append(self, **entry):
        self.epochs.append(entry)

    def column(self, key):
        return [e[key] for e in self.epochs]


def train_imputer(ds, spec, cfg=None, model_cfg=None, seed=0, masks=None, callback=None):
    """Train an :class:`ImputerModel` on the training rows of ``ds``.

    Masks come from ``spec`` through the hash-seeded generator unless given.
    The first ``ceil(pretrain_fraction * epochs)`` epochs update only the
    discriminator. Afterwards each batch takes one discriminator and one
    generator Adam step with their own learning rates. With ``cfg.monitor``
    set, both rates are divided by ``decay_factor`` when that logged quantity
    plateaus (``loss_d`` is watched for a stall in its rise).

    ``callback(epoch, model, entry)`` runs after every epoch; returning True
    stops training.

    Returns
    -------
    model : ImputerModel
    history : TrainLog
    """
    cfg = cfg or ImputerTrainConfig()
    model_cfg = model_cfg or ImputerConfig()
    X = ds.X[ds.is_train]
    K = masking.make_masks(X, spec) if masks is None else np.asarray(masks)
    K = K.astype(np.float64)
    n, d = X.shape
    ss = np.random.SeedSequence(seed)
    model_seed, split_seed, shuffle_seed, z_seed, hint_seed, noise_seed, val_seed = ss.spawn(7)
    model = ImputerModel(d, model_cfg, seed=model_seed)
    rng_split = np.random.default_rng(split_seed)
    rng_shuffle = np.random.default_rng(shuffle_seed)
    rng_z = np.random.default_rng(z_seed)
    rng_hint = np.random.default_rng(hint_seed)
    rng_noise = np.random.default_rng(noise_seed)

    n_val = int(round(n * cfg.validation_fraction))
    perm = rng_split.permutation(n)
    val_rows, tr_rows = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    X0 = fill_missing(X, K)
    Xt, Kt, X0t = X[tr_rows], K[tr_rows], X0[tr_rows]
    Xv, Kv, X0v = X[val_rows], K[val_rows], X0[val_rows]
    has_val = n_val > 0 and (Kv == 0).any()

    opt_g = Adam(model.G, cfg.lr_g, cfg.beta1, cfg.beta2)
    opt_d = Adam(model.D, cfg.lr_d, cfg.beta1, cfg.beta2)
    sched = LrSchedule(1.0, cfg.decay_factor, cfg.patience, cfg.tol, min_lr=cfg.decay_factor ** -cfg.max_decays)
    history = TrainLog()
    lam = model_cfg.lambda_mse
    noise = model_cfg.training_noise_std
    use_hint = model_cfg.hint_rate > 0
    m = len(tr_rows)
    bs = cfg.batch_size
    last_good = (model.G.state_dict(), model.D.state_dict())

    for epoch in range(cfg.epochs):
        train_g = epoch >= cfg.pretrain_epochs
        order = rng_shuffle.permutation(m)
        sum_d = sum_g = 0.0
        n_batches = 0
        for start in range(0, m, bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            x, k, x0 = Xt[idx], Kt[idx], X0t[idx]
            z = model.draw_z(rng_z, idx.size)
            gin = model.generator_input(x0, k, z)
            if noise > 0:
                gin = gin + rng_noise.normal(scale=noise, size=gin.shape)
            g = model.G.forward(gin, training=True)
            xhat = blend(x0, k, g)
            scored = None
            d_in = xhat
            if use_hint:
                hint, reveal = make_hint(k, model_cfg.hint_rate, rng_hint, return_reveal=True)
                d_in = np.hstack([xhat, hint])
                scored = (~reveal).astype(np.float64)

            khat = model.D.forward(d_in, training=True)
            loss_d, _ = adversarial_loss(k, khat, scored)
            model.D.backward(discriminator_grad(k, khat, scored))
            opt_d.step()

            loss_g = 0.0
            if train_g:
                khat = model.D.forward(d_in, training=True)
                _, loss_g = adversarial_loss(k, khat, scored)
                model.D.backward(generator_adv_grad(k, khat, scored))
                dg = (1.0 - k) * model.D.input_grad[:, :d]
                if lam > 0:
                    n_obs = k.sum()
                    if n_obs:
                        loss_g += lam * mse_observed(k, x0, g)
                        dg = dg + lam * 2.0 * k * (g - x0) / n_obs
                model.G.backward(dg)
                opt_g.step()
            if not (math.isfinite(loss_d) and math.isfinite(loss_g)):
                model.G.load_state_dict(last_good[0])
                model.D.load_state_dict(last_good[1])
                raise DivergenceError(f"non-finite loss at epoch {epoch}", model, history.epochs)
            sum_d += loss_d
            sum_g += loss_g
            n_batches += 1

        entry = {"epoch": epoch, "loss_d": sum_d / max(n_batches, 1), "loss_g": sum_g / max(n_batches, 1),
                 "lr_g": opt_g.lr, "lr_d": opt_d.lr, "pretrain": not train_g}
        if has_val:
            imp = model.sample(X0v, Kv, np.random.default_rng(val_seed))
            entry["rmse_val"] = rmse_missing(Xv, imp, Kv)
        history.append(**entry)
        last_good = (model.G.state_dict(), model.D.state_dict())
        if train_g and cfg.monitor != "none" and cfg.monitor in entry:
            factor = sched.step(entry[cfg.monitor] if cfg.monitor != "loss_d" else -entry["loss_d"])
            opt_g.lr = cfg.lr_g * factor
            opt_d.lr = cfg.lr_d * factor
        if callback is not None and callback(epoch, model, entry):
            break
    log.debug("imputer trained: %d epochs, final %s", len(history.epochs), history.epochs[-1] if history.epochs else None)
    return model, history


def impute(model, sample, z_seed=0):
    """One stochastic imputation of a :class:`~genimpute.data.MaskedSample`."""
    x = np.asarray(sample.x, dtype=np.float64)
    k = np.asarray(sample.k)
    if x.shape != (model.d,) or k.shape != (model.d,):
        raise ValueError(f"expected vectors of length {model.d}, got {x.shape}")
    x0 = fill_missing(x, k)[None, :]
    z = np.random.default_rng(z_seed).standard_normal((1, model.d_z))
    g = model.generate(x0, k[None, :].astype(np.float64), z)
    return blend(np.where(k == 1, x, 0.0), k, g[0])


def impute_many(model, x, k, n_samples, seed=0):
    """``n_samples`` imputations of one vector, as an ``[n_samples, d]`` array."""
    x0 = fill_missing(x, k)
    X0 = np.repeat(x0[None, :], n_samples, axis=0)
    K = np.repeat(np.asarray(k, dtype=np.float64)[None, :], n_samples, axis=0)
    return model.sample(X0, K, np.random.default_rng(seed))


def ttur_sweep(ds, spec, cfg=None, model_cfg=None, seed=0, rates=TTUR_RATES):
    """Train every ``(lr_g, lr_d)`` pair from ``rates``; rank by final held-out RMSE.

    Returns a list of ``(lr_g, lr_d, rmse, model)`` sorted best first.
    """
    cfg = cfg or ImputerTrainConfig()
    results = []
    for lr_g in rates:
        for lr_d in rates:
            trial = ImputerTrainConfig(**{**asdict(cfg), "lr_g": lr_g, "lr_d": lr_d})
            model, hist = train_imputer(ds, spec, trial, model_cfg, seed)
            results.append((lr_g, lr_d, hist.epochs[-1].get("rmse_val", math.inf), model))
    return sorted(results, key=lambda r: r[2])
