"""Dataset ingestion, standardization, splitting and synthetic generators."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}


class DataError(ValueError):
    pass


@dataclass
class Standardization:
    """Affine maps between original and standardized units.

    ``ytilde_min``/``ytilde_max`` are the training-split target bounds, kept
    in standardized units because that is where the CDF head works.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0
    ytilde_min: float = -1.0
    ytilde_max: float = 1.0
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.x_mean = np.asarray(self.x_mean, dtype=np.float64).reshape(-1)
        self.x_std = np.asarray(self.x_std, dtype=np.float64).reshape(-1)
        self.y_mean = float(self.y_mean)
        self.y_std = float(self.y_std)
        self.ytilde_min = float(self.ytilde_min)
        self.ytilde_max = float(self.ytilde_max)
        if self.x_mean.shape != self.x_std.shape:
            raise DataError("x_mean and x_std lengths differ")
        if np.any(self.x_std <= 0) or self.y_std <= 0:
            raise DataError("standard deviations must be strictly positive")
        if not self.ytilde_min < self.ytilde_max:
            raise DataError(f"need ytilde_min < ytilde_max, got {self.ytilde_min}, {self.ytilde_max}")

    @classmethod
    def identity(cls, d, ytilde_min=-1.0, ytilde_max=1.0):
        return cls(np.zeros(d), np.ones(d), 0.0, 1.0, ytilde_min, ytilde_max)

    @property
    def dim(self):
        return self.x_mean.shape[0]

    def transform_x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_std + self.y_mean

    def to_dict(self):
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "ytilde_min": self.ytilde_min,
            "ytilde_max": self.ytilde_max,
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["x_mean"], d["x_std"], d["y_mean"], d["y_std"],
            d["ytilde_min"], d["ytilde_max"], list(d.get("feature_names", [])),
        )


@dataclass
class Dataset:
    """Feature matrix, targets and split labels.

    When ``stats`` is set, ``x``/``y`` are in standardized units and
    ``x_raw``/``y_raw`` keep the original values.
    """

    x: np.ndarray
    y: np.ndarray
    columns: list
    split: np.ndarray
    stats: Standardization | None = None
    x_raw: np.ndarray | None = None
    y_raw: np.ndarray | None = None
    rejected_rows: int = 0
    target_name: str = "y"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x.reshape(-1, 1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.split = np.asarray(self.split, dtype=np.int8).reshape(-1)
        n = self.y.shape[0]
        if self.x.shape[0] != n or self.split.shape[0] != n:
            raise DataError("x, y and split lengths differ")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite values")

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def part(self, which):
        """(x, y) rows of one split; ``which`` is a split code or name."""
        code = which if isinstance(which, int) else {v: k for k, v in SPLIT_NAMES.items()}[which]
        m = self.split == code
        return self.x[m], self.y[m]

    def with_split(self, split):
        return Dataset(self.x, self.y, self.columns, split, self.stats, self.x_raw,
                       self.y_raw, self.rejected_rows, self.target_name)


def load_csv(path, target=None):
    """Read a header-first numeric CSV.

    Rows with a cell that does not parse as a finite number are dropped and
    counted in ``rejected_rows``.  ``target`` names the response column and
    defaults to the last column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if target is None:
            t_idx = len(header) - 1
        elif target in header:
            t_idx = header.index(target)
        else:
            raise DataError(f"target column {target!r} not found; available columns: {', '.join(header)}")
        rows, rejected = [], 0
        for rec in reader:
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                rejected += 1
                continue
            try:
                vals = [float(c) for c in rec]
            except ValueError:
                rejected += 1
                continue
            if not all(math.isfinite(v) for v in vals):
                rejected += 1
                continue
            rows.append(vals)
    if rejected:
        log.warning("%s: rejected %d unparseable row(s)", path, rejected)
    if not rows:
        raise DataError(f"{path}: no usable rows")
    arr = np.array(rows, dtype=np.float64)
    feat_idx = [i for i in range(len(header)) if i != t_idx]
    return Dataset(
        arr[:, feat_idx], arr[:, t_idx], [header[i] for i in feat_idx],
        np.zeros(arr.shape[0], dtype=np.int8), rejected_rows=rejected,
        target_name=header[t_idx],
    )


def load_features(path, columns):
    """Pick ``columns`` (by header name) out of a CSV; other columns are ignored.

    Returns (matrix, rejected row count).  Unparseable rows are dropped.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing feature column(s) {', '.join(missing)}; "
                            f"available columns: {', '.join(header)}")
        idx = [header.index(c) for c in columns]
        rows, rejected = [], 0
        for rec in reader:
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                vals = [float(rec[i]) for i in idx]
            except (ValueError, IndexError):
                rejected += 1
                continue
            if not all(math.isfinite(v) for v in vals):
                rejected += 1
                continue
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no usable rows")
    return np.array(rows, dtype=np.float64), rejected


def write_csv(path, x, y, columns=None, target_name="y"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    columns = columns or [f"x{i + 1}" for i in range(x.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns) + [target_name])
        for row, t in zip(x, np.asarray(y).reshape(-1)):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def split_indices(n, val_fraction=0.2, test_fraction=0.0, rng=None):
    """Random disjoint split labels; every row gets exactly one label."""
    if n < 2:
        raise DataError(f"need at least 2 rows to split, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    if val_fraction > 0:
        n_val = max(n_val, 1)
    if n - n_val - n_test < 1:
        raise DataError(f"{n} rows leave no training data for this split")
    split = np.full(n, TRAIN, dtype=np.int8)
    split[perm[:n_test]] = TEST
    split[perm[n_test:n_test + n_val]] = VAL
    return split


def standardize(ds):
    """Standardize features and target with training-split statistics only.

    Constant training columns are dropped (with a warning).  Returns a new
    Dataset whose ``x``/``y`` are standardized and whose ``stats`` also carry
    the training-split target bounds.
    """
    train = ds.split == TRAIN
    if not np.any(train):
        raise DataError("standardize needs a non-empty training split")
    x_raw = ds.x_raw if ds.x_raw is not None else ds.x
    y_raw = ds.y_raw if ds.y_raw is not None else ds.y
    xt = x_raw[train]
    mean = xt.mean(axis=0)
    std = xt.std(axis=0)
    keep = std > 0
    if not np.all(keep):
        dropped = [c for c, k in zip(ds.columns, keep) if not k]
        log.warning("dropping constant column(s): %s", ", ".join(map(str, dropped)))
    if not np.any(keep):
        raise DataError("every feature column is constant on the training split")
    x_raw = x_raw[:, keep]
    columns = [c for c, k in zip(ds.columns, keep) if k]
    y_mean = float(y_raw[train].mean())
    y_std = float(y_raw[train].std())
    if y_std <= 0:
        raise DataError("target is constant on the training split")
    ys = (y_raw - y_mean) / y_std
    stats = Standardization(
        mean[keep], std[keep], y_mean, y_std,
        float(ys[train].min()), float(ys[train].max()), columns,
    )
    return Dataset(
        stats.transform_x(x_raw), ys, columns, ds.split, stats,
        x_raw, y_raw, ds.rejected_rows, ds.target_name,
    )


# ---------------------------------------------------------------------------
# Synthetic families with closed-form conditional quantiles.

FAMILIES = ("linear-constant", "linear-linear", "quad-linear", "sin-constant")


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "linear-constant"
    n: int = 1000
    seed: int = 0
    sigma: float = 0.3
    x_low: float = -1.0
    x_high: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}; choose one of {', '.join(FAMILIES)}")
        if self.n < 1:
            raise DataError("n must be >= 1")
        if not self.sigma > 0:
            raise DataError("sigma must be > 0")

    def to_dict(self):
        return {"family": self.family, "n": self.n, "seed": self.seed, "sigma": self.sigma,
                "x_low": self.x_low, "x_high": self.x_high, "noise": "gaussian"}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], int(d["n"]), int(d["seed"]), float(d["sigma"]),
                   float(d.get("x_low", -1.0)), float(d.get("x_high", 1.0)))


def _location(family, x):
    if family in ("linear-constant", "linear-linear"):
        return 2.0 * x + 1.0
    if family == "quad-linear":
        return 2.0 * x ** 2 - 1.0
    if family == "sin-constant":
        return np.sin(2.0 * np.pi * x)
    raise DataError(f"unknown family {family!r}; choose one of {', '.join(FAMILIES)}")


def _scale(family, x):
    if family in ("linear-linear", "quad-linear"):
        return x + 1.5
    return np.ones_like(x)


def oracle_quantile(family, tau, x, sigma=0.3):
    """Exact conditional tau-quantile of the generating process."""
    x = np.asarray(x, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any((tau <= 0) | (tau >= 1)):
        raise DataError("tau must lie in (0, 1)")
    return _location(family, x) + sigma * _scale(family, x) * ndtri(tau)


def oracle_mean(family, x, sigma=0.3):
    return _location(family, np.asarray(x, dtype=np.float64))


def generate(spec):
    """Draw ``spec.n`` rows; returns the dataset and a tau, x -> quantile oracle."""
    rng = np.random.default_rng(spec.seed)
    x = rng.uniform(spec.x_low, spec.x_high, size=spec.n)
    eps = rng.standard_normal(spec.n)
    y = _location(spec.family, x) + spec.sigma * _scale(spec.family, x) * eps
    ds = Dataset(x.reshape(-1, 1), y, ["x1"], np.zeros(spec.n, dtype=np.int8))

    def oracle(tau, xs):
        return oracle_quantile(spec.family, tau, np.asarray(xs).reshape(-1), spec.sigma)

    return ds, oracle
