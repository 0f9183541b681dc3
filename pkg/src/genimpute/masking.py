"""Deterministic MCAR mask synthesis.

Each complete feature vector is hashed (FNV-1a, 64 bit, over the
little-endian bytes of the salt followed by the vector quantized to six
decimals) and the hash seeds a per-sample xoshiro256** stream (state filled by
splitmix64). The same vector therefore always loses the same features,
on any platform, without storing masks.

Mask convention: 1 = observed, 0 = missing.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from . import kernels

QUANT_DECIMALS = 6
_QUANT_LIMIT = 9.0e12  # |x| * 1e6 must fit in int64
MISSING = np.nan

BETA_RANGE = (1.0, 10.0)
CALIBRATION_GRID = 181
CALIBRATION_DRAWS = 100_000
CALIBRATION_SEED = 20200101


@dataclass(frozen=True)
class MissingnessSpec:
    mechanism: str = "uniform"
    rate: float = 0.0
    salt: int = 0
    grid: tuple | None = None
    alpha: float = 1.0
    beta: float = 1.0
    invert: bool = False

    def __post_init__(self):
        if self.mechanism not in ("uniform", "rectangular"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"missing rate must lie in [0, 1], got {self.rate}")
        if self.mechanism == "rectangular":
            if self.alpha < 1.0 or self.beta < 1.0:
                raise ValueError("beta parameters must be >= 1")
            if self.rate > 0.5 and not self.invert:
                raise ValueError("rectangular masks above 50% missing must set invert")

    @classmethod
    def rectangular(cls, rate, grid, salt=0, draws=CALIBRATION_DRAWS):
        """Rectangular spec with beta parameters calibrated for ``rate`` on ``grid``."""
        cal = calibrate_beta(rate, grid, draws=draws)
        return cls("rectangular", rate, salt, tuple(grid), cal.alpha, cal.beta, cal.invert)

    def to_dict(self):
        return {"mechanism": self.mechanism, "rate": self.rate, "salt": self.salt,
                "grid": list(self.grid) if self.grid else None,
                "alpha": self.alpha, "beta": self.beta, "invert": self.invert}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("grid") is not None:
            d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass(frozen=True)
class RectParams:
    px: int
    py: int
    w: float
    h: float


def quantize(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("cannot hash non-finite features")
    if np.abs(x).max(initial=0.0) > _QUANT_LIMIT:
        raise ValueError("feature magnitude too large to quantize")
    return np.rint(x * 10**QUANT_DECIMALS).astype(np.int64)


def hash_rows(X, salt=0):
    """Seeds for every row of ``X`` (one 64-bit hash per row)."""
    X = np.asarray(X, dtype=np.float64)
    X2 = X.reshape(X.shape[0], -1) if X.ndim > 1 else X.reshape(1, -1)
    return kernels.fnv1a_rows(quantize(X2), int(salt) & 0xFFFFFFFFFFFFFFFF)


def hash_seed(x, salt=0):
    """64-bit seed of a single complete feature vector (any shape, hashed flat)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return int(hash_rows(x, salt)[0])


def sample_uniforms(x, n, salt=0):
    """The first ``n`` draws of the xoshiro stream belonging to ``x``."""
    return kernels.uniform_rows(np.array([hash_seed(x, salt)], dtype=np.uint64), n)[0]


# -- uniform mechanism -------------------------------------------------------

def _check_rate(r):
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {r}")


def gen_uniform_mask(x, r, salt=0):
    """Mask for one vector: each entry missing independently with probability ``r``."""
    _check_rate(r)
    x = np.asarray(x, dtype=np.float64)
    u = sample_uniforms(x, x.size, salt).reshape(x.shape)
    return (u >= r).astype(np.uint8)


def uniform_masks(X, r, salt=0):
    """Row-wise :func:`gen_uniform_mask` for a whole ``[n, d]`` matrix."""
    _check_rate(r)
    X = np.asarray(X, dtype=np.float64)
    seeds = hash_rows(X, salt)
    u = kernels.uniform_rows(seeds, X.shape[1])
    return (u >= r).astype(np.uint8)


# -- rectangular mechanism ---------------------------------------------------

def beta_ppf(u, alpha, beta):
    """Inverse CDF of Beta(alpha, beta); closed form when either parameter is 1."""
    u = np.asarray(u, dtype=np.float64)
    if beta == 1.0:
        return u ** (1.0 / alpha)
    if alpha == 1.0:
        return 1.0 - (1.0 - u) ** (1.0 / beta)
    return special.betaincinv(alpha, beta, u)


def _sample_beta(u, alpha, beta):
    return beta_ppf(u, alpha, beta)


def sample_rect_params(u, grid, alpha, beta):
    """Rectangle from four uniforms: integer center, beta-distributed width/height."""
    nx, ny = grid
    px = min(int(u[0] * nx), nx - 1)
    py = min(int(u[1] * ny), ny - 1)
    w = float(_sample_beta(u[2], alpha, beta)) * nx
    h = float(_sample_beta(u[3], alpha, beta)) * ny
    return RectParams(px, py, w, h)


def _covered(p, w, n):
    # integer cells c in [0, n) with p - w/2 <= c < p + w/2
    lo = np.maximum(np.ceil(p - w / 2.0), 0)
    hi = np.minimum(np.ceil(p + w / 2.0), n)
    return np.maximum(hi - lo, 0).astype(np.int64), lo.astype(np.int64)


def rect_mask(grid, params, invert=False):
    """Rasterize ``params`` on ``grid``: cells inside the rectangle are missing (0)."""
    nx, ny = grid
    cx, x0 = _covered(params.px, params.w, nx)
    cy, y0 = _covered(params.py, params.h, ny)
    k = np.ones((nx, ny), dtype=np.uint8)
    k[x0:x0 + cx, y0:y0 + cy] = 0
    if invert:
        k = 1 - k
    return k


def gen_rect_mask(x, spec):
    """Rectangular mask for a 2-D feature grid ``x`` under ``spec``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"rectangular masks need a 2-D grid, got shape {x.shape}")
    if spec.mechanism != "rectangular":
        raise ValueError("spec is not rectangular")
    if spec.grid is not None and tuple(spec.grid) != x.shape:
        raise ValueError(f"grid {spec.grid} does not match input shape {x.shape}")
    u = sample_uniforms(x, 4, spec.salt)
    params = sample_rect_params(u, x.shape, spec.alpha, spec.beta)
    return rect_mask(x.shape, params, spec.invert)


def rect_masks(X, spec):
    """:func:`gen_rect_mask` for a stack of grids ``[n, nx, ny]``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError("expected a stack of 2-D grids")
    seeds = hash_rows(X.reshape(X.shape[0], -1), spec.salt)
    U = kernels.uniform_rows(seeds, 4)
    grid = X.shape[1:]
    return np.stack([rect_mask(grid, sample_rect_params(u, grid, spec.alpha, spec.beta), spec.invert)
                     for u in U])


def make_masks(X, spec):
    """Masks for a dataset matrix under either mechanism.

    Rectangular specs reshape each row to ``spec.grid``.
    """
    X = np.asarray(X, dtype=np.float64)
    if spec.mechanism == "uniform":
        return uniform_masks(X, spec.rate, spec.salt)
    if spec.grid is None:
        raise ValueError("rectangular spec needs a grid shape")
    grids = X.reshape((X.shape[0],) + tuple(spec.grid))
    return rect_masks(grids, spec).reshape(X.shape)


# -- calibration -------------------------------------------------------------

@dataclass(frozen=True)
class BetaCalibration:
    rate: float
    alpha: float
    beta: float
    invert: bool
    achieved: float


def simulate_rect_rate(alpha, beta, grid, draws=CALIBRATION_DRAWS, seed=CALIBRATION_SEED, u=None):
    """Monte Carlo mean fraction of cells covered by one rectangle (non-inverted).

    ``alpha``/``beta`` may be arrays of equal length; the same uniforms are
    reused for every parameter pair (common random numbers).
    """
    nx, ny = grid
    if u is None:
        u = np.random.default_rng(seed).random((4, draws))
    px = np.minimum(np.floor(u[0] * nx), nx - 1)
    py = np.minimum(np.floor(u[1] * ny), ny - 1)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    alpha, beta = np.broadcast_arrays(alpha, beta)
    rates = np.empty(alpha.shape)
    for i, (a, b) in enumerate(zip(alpha, beta)):
        w = beta_ppf(u[2], a, b) * nx
        h = beta_ppf(u[3], a, b) * ny
        cx, _ = _covered(px, w, nx)
        cy, _ = _covered(py, h, ny)
        rates[i] = np.mean(cx * cy) / (nx * ny)
    return rates if rates.size > 1 else float(rates[0])


def _invert_curve(params, rates, target):
    # rates monotone in params; linear interpolation of the crossing
    order = np.argsort(rates)
    return float(np.interp(target, rates[order], params[order]))


def calibrate_beta(r, grid, draws=CALIBRATION_DRAWS, seed=CALIBRATION_SEED, tol=0.01,
                   n_grid=CALIBRATION_GRID):
    """Beta parameters whose rectangles miss ``r`` of the grid on average.

    One parameter is pinned to 1 while the other sweeps ``[1, 10]``:
    ``alpha = 1`` with growing ``beta`` shrinks rectangles below the
    ``Beta(1, 1)`` rate; ``beta = 1`` with growing ``alpha`` enlarges them.
    Rates above one half calibrate the complement and set ``invert``.

    Raises
    ------
    ValueError
        If no parameter in range comes within ``tol`` of the target.
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"calibration rate must lie in (0, 1), got {r}")
    invert = r > 0.5
    # rounding keeps 1 - 0.8 and 0.2 on the same calibration point
    target = round(1.0 - r, 12) if invert else r
    u = np.random.default_rng(seed).random((4, draws))
    sweep = np.linspace(BETA_RANGE[0], BETA_RANGE[1], n_grid)
    ones = np.ones_like(sweep)
    base = simulate_rect_rate(1.0, 1.0, grid, u=u)
    if target <= base:
        rates = simulate_rect_rate(ones, sweep, grid, u=u)
        lo, hi = rates.min(), rates.max()
        b = _invert_curve(sweep, rates, target)
        alpha, beta = 1.0, b
    else:
        rates = simulate_rect_rate(sweep, ones, grid, u=u)
        lo, hi = rates.min(), rates.max()
        a = _invert_curve(sweep, rates, target)
        alpha, beta = a, 1.0
    achieved = simulate_rect_rate(alpha, beta, grid, draws=draws, seed=seed + 1)
    if abs(achieved - target) > tol:
        lo_all = simulate_rect_rate(1.0, BETA_RANGE[1], grid, u=u)
        hi_all = simulate_rect_rate(BETA_RANGE[1], 1.0, grid, u=u)
        raise ValueError(
            f"missing rate {r} unreachable: beta parameters in {list(BETA_RANGE)} give "
            f"rectangle rates in [{lo_all:.4f}, {hi_all:.4f}] (and their complements above 0.5)")
    if invert:
        achieved = 1.0 - achieved
    return BetaCalibration(r, alpha, beta, invert, float(achieved))


# -- applying masks ----------------------------------------------------------

def apply_mask(x, k, y=None):
    """Copy observed entries of ``x`` and put the NaN sentinel everywhere else."""
    from .data import MaskedSample

    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.uint8)
    if x.shape != k.shape:
        raise ValueError(f"mask shape {k.shape} does not match feature shape {x.shape}")
    if not np.isin(k, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    xm = np.where(k == 1, x, MISSING)
    return MaskedSample(xm, k, y)


# -- export ------------------------------------------------------------------

def encode_rle(k):
    """Run-length encoding of a flattened mask, e.g. ``"1x5 0x3 1x28"``."""
    flat = np.asarray(k, dtype=np.uint8).ravel()
    if flat.size == 0:
        return ""
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    return " ".join(f"{flat[s]}x{e - s}" for s, e in zip(starts, ends))


def decode_rle(text, shape=None):
    parts = []
    for token in text.split():
        v, n = token.split("x")
        parts.append(np.full(int(n), int(v), dtype=np.uint8))
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)
    return flat.reshape(shape) if shape is not None else flat


def export_masks(path, masks, ids=None):
    """Write masks as CSV (``sample_id,mask_rle``) or JSON, chosen by extension."""
    import csv
    import json

    masks = np.asarray(masks)
    ids = list(range(len(masks))) if ids is None else list(ids)
    rows = [(i, encode_rle(m)) for i, m in zip(ids, masks)]
    if str(path).endswith(".json"):
        with open(path, "w") as fh:
            json.dump({"shape": list(masks.shape[1:]),
                       "masks": [{"sample_id": i, "mask_rle": r} for i, r in rows]}, fh)
    else:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "mask_rle"])
            w.writerows(rows)


def with_rate(spec, rate):
    return replace(spec, rate=rate)


__all__ = [
    "MissingnessSpec", "RectParams", "BetaCalibration", "hash_seed", "hash_rows",
    "gen_uniform_mask", "uniform_masks", "gen_rect_mask", "rect_masks", "rect_mask",
    "make_masks", "calibrate_beta", "simulate_rect_rate", "apply_mask", "encode_rle",
    "decode_rle", "export_masks", "sample_rect_params", "beta_ppf",
]
