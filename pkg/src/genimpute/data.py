"""Datasets: CSV ingestion, preprocessing, splits and synthetic generators."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class Column:
    name: str
    kind: str = "continuous"  # or "categorical"
    categories: list | None = None
    source: str | None = None  # original column for one-hot expansions


@dataclass
class Dataset:
    """Feature matrix, labels, column metadata and split assignment.

    ``is_train`` marks training rows; everything else is test. ``stats``
    accumulates the preprocessing manifest (normalization statistics, seeds).
    """

    X: np.ndarray
    y: np.ndarray
    columns: list
    n_classes: int
    is_train: np.ndarray
    class_names: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    raw: np.ndarray | None = None  # categorical codes / strings before encoding

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.is_train = np.asarray(self.is_train, dtype=bool)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("features and labels disagree in length")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels must lie in 0..n_classes-1")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def train(self):
        return self.X[self.is_train], self.y[self.is_train]

    @property
    def test(self):
        return self.X[~self.is_train], self.y[~self.is_train]

    def subset(self, rows):
        return replace(self, X=self.X[rows], y=self.y[rows], is_train=self.is_train[rows],
                       raw=None if self.raw is None else self.raw[rows])


@dataclass
class MaskedSample:
    """One incomplete instance: features (NaN where missing), mask, optional label."""

    x: np.ndarray
    k: np.ndarray
    y: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.uint8)
        if self.x.shape != self.k.shape:
            raise ValueError(f"mask shape {self.k.shape} does not match features {self.x.shape}")

    @property
    def filled(self):
        """Features with missing entries replaced by 0 (the value networks see)."""
        return np.where(self.k == 1, np.nan_to_num(self.x, nan=0.0), 0.0)


# -- CSV ---------------------------------------------------------------------

@dataclass
class Schema:
    label: str
    categorical: list = field(default_factory=list)
    drop: list = field(default_factory=list)
    split_column: str | None = None
    train_value: str = "train"
    normalization: str = "statistical"

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


class CsvFormatError(ValueError):
    pass


def load_csv(path, schema):
    """Read a CSV with a header row into a :class:`Dataset`.

    Labels are mapped to ``0..c-1`` in sorted order of the raw values.
    Categorical columns are kept as raw strings until
    :func:`encode_categorical`. Without a ``split_column`` every row is
    marked as training data.
    """
    if isinstance(schema, (str, bytes)) or hasattr(schema, "__fspath__"):
        schema = Schema.load(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        rows = [(i + 2, r) for i, r in enumerate(reader) if any(c.strip() for c in r)]
    if schema.label not in header:
        raise CsvFormatError(f"{path}: label column {schema.label!r} not in header")
    skip = {schema.label, schema.split_column, *schema.drop}
    feat_names = [h for h in header if h not in skip]
    cat = set(schema.categorical)
    unknown = cat - set(feat_names)
    if unknown:
        raise CsvFormatError(f"{path}: categorical columns {sorted(unknown)} not in header")
    idx = {h: i for i, h in enumerate(header)}

    labels, splits, values = [], [], []
    for line, row in rows:
        if len(row) != len(header):
            raise CsvFormatError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        lab = row[idx[schema.label]].strip()
        if lab == "":
            raise CsvFormatError(f"{path}:{line}: missing label")
        labels.append(lab)
        if schema.split_column:
            splits.append(row[idx[schema.split_column]].strip() == schema.train_value)
        vals = []
        for name in feat_names:
            cell = row[idx[name]].strip()
            if name in cat:
                vals.append(cell)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(f"{path}:{line}: column {name!r} is not numeric: {cell!r}") from None
            if not math.isfinite(v):
                raise CsvFormatError(f"{path}:{line}: column {name!r} is not finite")
            vals.append(v)
        values.append(vals)

    try:
        keys = sorted(set(labels), key=float)
    except ValueError:
        keys = sorted(set(labels))
    lookup = {k: i for i, k in enumerate(keys)}
    y = np.array([lookup[v] for v in labels], dtype=np.int64)
    raw = np.array(values, dtype=object).reshape(len(values), len(feat_names))
    columns = [Column(n, "categorical" if n in cat else "continuous") for n in feat_names]
    X = np.zeros(raw.shape)
    for j, c in enumerate(columns):
        if c.kind == "continuous":
            X[:, j] = raw[:, j].astype(np.float64)
    is_train = np.array(splits, dtype=bool) if schema.split_column else np.ones(len(y), dtype=bool)
    ds = Dataset(X, y, columns, len(keys), is_train, class_names=keys, raw=raw)
    ds.stats["schema"] = {"label": schema.label, "categorical": list(schema.categorical)}
    return ds


# -- preprocessing -----------------------------------------------------------

def fit_normalization(X, mode="statistical"):
    """Per-column ``(shift, scale)`` so that ``(X - shift) / scale`` is normalized.

    ``statistical`` standardizes with the population standard deviation;
    ``unity`` maps the training range onto ``[-1, 1]``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("cannot fit normalization on an empty training split")
    if mode == "statistical":
        shift = X.mean(axis=0)
        scale = X.std(axis=0)
    elif mode == "unity":
        lo, hi = X.min(axis=0), X.max(axis=0)
        shift = (lo + hi) / 2.0
        scale = (hi - lo) / 2.0
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    flat = scale <= 0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} constant column(s) scaled by 1", RuntimeWarning, stacklevel=2)
        scale = np.where(flat, 1.0, scale)
    return shift, scale


def normalize(ds, mode="statistical", stats=None):
    """Normalize continuous columns with statistics frozen from the training split.

    Pass ``stats`` (as stored in ``ds.stats['normalization']`` of a
    previously processed dataset) to reuse them instead of refitting.
    """
    cont = np.array([c.kind == "continuous" for c in ds.columns])
    X = ds.X.copy()
    if stats is None:
        shift, scale = fit_normalization(ds.X[ds.is_train][:, cont], mode)
        stats = {"mode": mode, "shift": shift.tolist(), "scale": scale.tolist()}
    shift, scale = np.asarray(stats["shift"]), np.asarray(stats["scale"])
    X[:, cont] = (X[:, cont] - shift) / scale
    out = replace(ds, X=X, stats={**ds.stats, "normalization": stats})
    return out


def denormalize(ds_or_stats, X, columns=None):
    """Map normalized continuous features back to raw units."""
    stats = ds_or_stats.stats["normalization"] if isinstance(ds_or_stats, Dataset) else ds_or_stats
    shift, scale = np.asarray(stats["shift"]), np.asarray(stats["scale"])
    X = np.array(X, dtype=np.float64, copy=True)
    if columns is None:
        return X * scale + shift
    cont = np.array([c.kind == "continuous" for c in columns])
    X[..., cont] = X[..., cont] * scale + shift
    return X


def encode_categorical(ds, smoothing_fraction=0.05, rng_seed=0):
    """One-hot expand categorical columns and smooth them with Gaussian noise.

    Categories come from the training rows; an unseen category maps to an
    all-zero block and is counted in ``stats['unknown_categories']``. The
    noise variance is ``smoothing_fraction`` times the training variance of
    each one-hot column and is drawn once, here.
    """
    if ds.raw is None or not any(c.kind == "categorical" for c in ds.columns):
        return ds
    rng = np.random.default_rng(rng_seed)
    blocks, cols = [], []
    unknown = 0
    noise_std = {}
    for j, c in enumerate(ds.columns):
        if c.kind == "continuous":
            blocks.append(ds.X[:, j:j + 1])
            cols.append(c)
            continue
        values = ds.raw[:, j].astype(str)
        cats = c.categories or sorted(set(values[ds.is_train]))
        onehot = (values[:, None] == np.array(cats)[None, :]).astype(np.float64)
        unknown += int((onehot.sum(axis=1) == 0).sum())
        var = onehot[ds.is_train].var(axis=0)
        std = np.sqrt(smoothing_fraction * var)
        if smoothing_fraction > 0:
            onehot = onehot + rng.normal(size=onehot.shape) * std
        noise_std[c.name] = std.tolist()
        blocks.append(onehot)
        cols += [Column(f"{c.name}={v}", "encoded", list(cats), c.name) for v in cats]
    X = np.hstack(blocks)
    stats = {**ds.stats, "encoding": {"smoothing_fraction": smoothing_fraction, "seed": rng_seed,
                                      "noise_std": noise_std},
             "unknown_categories": unknown}
    if unknown:
        warnings.warn(f"{unknown} unseen categorical value(s) encoded as all-zero", RuntimeWarning, stacklevel=2)
    return replace(ds, X=X, columns=cols, stats=stats, raw=None)


def split(ds, train_fraction=0.8, seed=0):
    """Random disjoint train/test assignment with ``round(n * train_fraction)`` training rows."""
    if ds.n < 2:
        raise ValueError("need at least two rows to split")
    n_train = int(round(ds.n * train_fraction))
    perm = np.random.default_rng(seed).permutation(ds.n)
    is_train = np.zeros(ds.n, dtype=bool)
    is_train[perm[:n_train]] = True
    return replace(ds, is_train=is_train, stats={**ds.stats, "split": {"fraction": train_fraction, "seed": seed}})


def holdout(rows, fraction, seed):
    """Split an index array into ``(kept, held_out)`` with ``fraction`` held out."""
    rows = np.asarray(rows)
    perm = np.random.default_rng(seed).permutation(rows.size)
    n_hold = int(round(rows.size * fraction))
    return np.sort(rows[perm[n_hold:]]), np.sort(rows[perm[:n_hold]])


def save_manifest(ds, path):
    with open(path, "w") as fh:
        json.dump(ds.stats, fh, indent=2, sort_keys=True)


# -- synthetic data ----------------------------------------------------------

SQUARE_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
VERTEX_CLASSES = np.array([0, 1, 1, 0])  # diagonal vertices share a class


def make_four_gaussians(n=5000, std=0.1, seed=0, train_fraction=0.8):
    """Equal-weight mixture of four isotropic Gaussians on the unit-square vertices.

    Components get ``n // 4`` samples each (the remainder goes to the first
    ones); rows are shuffled.
    """
    if n < 4:
        raise ValueError("need at least one sample per component")
    rng = np.random.default_rng(seed)
    counts = np.full(4, n // 4)
    counts[: n % 4] += 1
    comp = np.repeat(np.arange(4), counts)
    X = SQUARE_VERTICES[comp] + rng.normal(scale=std, size=(n, 2))
    perm = rng.permutation(n)
    X, comp = X[perm], comp[perm]
    ds = Dataset(X, VERTEX_CLASSES[comp], [Column("x1"), Column("x2")], 2, np.ones(n, dtype=bool),
                 class_names=["0", "1"])
    ds = split(ds, train_fraction, seed)
    ds.stats["component"] = comp.tolist()
    return ds


def make_gaussian_1d(n=5000, mean=0.0, std=0.25, seed=0, train_fraction=0.8):
    """Scalar Gaussian samples with a constant label."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    X = mean + std * rng.normal(size=(n, 1))
    ds = Dataset(X, np.zeros(n, dtype=np.int64), [Column("x")], 1, np.ones(n, dtype=bool), class_names=["0"])
    return split(ds, train_fraction, seed) if n >= 2 else ds
