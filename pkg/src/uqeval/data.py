"""Datasets: CSV ingestion, deterministic splits, bootstrap indices, synthetic generators."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write, derived_rng
from .errors import ConfigError, DataError, InfeasibleSplitError, InputError


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    group_ids: np.ndarray | None = None
    feature_names: list = field(default_factory=list)
    target_units: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.features.ndim != 2:
            raise DataError(f"features must be a 2-D matrix, got shape {self.features.shape}")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise DataError(f"dataset needs at least one row and one feature, got {n}x{d}")
        if self.targets.shape[0] != n:
            raise DataError(f"{n} feature rows but {self.targets.shape[0]} targets")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise DataError("dataset contains non-finite values")
        if self.group_ids is not None:
            self.group_ids = np.asarray(self.group_ids, dtype=np.int64).reshape(-1)
            if self.group_ids.shape[0] != n:
                raise DataError(f"group_ids cover {self.group_ids.shape[0]} of {n} rows")
        if not self.feature_names:
            self.feature_names = [f"x{i + 1}" for i in range(d)]
        if len(self.feature_names) != d:
            raise DataError(f"{len(self.feature_names)} feature names for {d} features")

    def __len__(self):
        return self.targets.shape[0]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[indices],
            self.targets[indices],
            None if self.group_ids is None else self.group_ids[indices],
            list(self.feature_names),
            self.target_units,
        )

    def xy(self, indices=None):
        if indices is None:
            return self.features, self.targets
        return self.features[indices], self.targets[indices]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path, target, group=None, target_units=""):
    """Read a headered CSV. Every column other than ``target``/``group`` is a numeric feature.

    Group labels may be arbitrary strings; they are relabelled densely from 0 in
    order of first appearance. Errors name the offending row (1-based, header is
    row 1) and column.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if not body:
        raise DataError(f"{path}: header only, no data rows")
    for name in (target, group):
        if name is not None and name not in header:
            raise DataError(f"{path}: missing column {name!r} (have {header})")
    feat_cols = [i for i, h in enumerate(header) if h not in (target, group)]
    if not feat_cols:
        raise DataError(f"{path}: no feature columns besides {target!r}")
    t_col = header.index(target)
    g_col = header.index(group) if group is not None else None

    n = len(body)
    features = np.empty((n, len(feat_cols)))
    targets = np.empty(n)
    raw_groups = []
    bad_rows = []
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}")
        for j, c in enumerate(feat_cols):
            features[r, j] = _parse_float(row[c], path, line, header[c])
        targets[r] = _parse_float(row[t_col], path, line, header[t_col])
        if g_col is not None:
            raw_groups.append(row[g_col].strip())
        if not (np.all(np.isfinite(features[r])) and math.isfinite(targets[r])):
            bad_rows.append(line)
    if bad_rows:
        raise DataError(f"{path}: non-finite values in rows {bad_rows}")

    group_ids = None
    if g_col is not None:
        relabel = {}
        group_ids = np.array([relabel.setdefault(g, len(relabel)) for g in raw_groups], dtype=np.int64)
    return Dataset(features, targets, group_ids, [header[c] for c in feat_cols], target_units)


def _parse_float(cell, path, line, column):
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{path}: row {line}, column {column!r}: cannot parse {cell!r} as a number") from None


def write_csv(dataset, path, target="y", group="group"):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(dataset.feature_names) + [target]
    if dataset.group_ids is not None:
        header.append(group)
    writer.writerow(header)
    for i in range(len(dataset)):
        row = [repr(float(v)) for v in dataset.features[i]] + [repr(float(dataset.targets[i]))]
        if dataset.group_ids is not None:
            row.append(int(dataset.group_ids[i]))
        writer.writerow(row)
    atomic_write(path, buf.getvalue())


def write_predictions_csv(path, indices, y_true, preds):
    """Export (index, y_true, y_pred, var_ale, var_epi, var_total) per test row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "y_true", "y_pred", "var_ale", "var_epi", "var_total"])
    for k, i in enumerate(indices):
        writer.writerow([int(i)] + [repr(float(v[k])) for v in (y_true, preds.mean, preds.ale, preds.epi, preds.total)])
    atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    strategy: str = "random"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError(f"split fractions must be three positive numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.fractions)}")
        if self.strategy not in ("random", "group"):
            raise ConfigError(f"unknown split strategy {self.strategy!r}")


def target_counts(n, fractions):
    """Largest-remainder rounding of ``n * fractions`` to integers summing to ``n``."""
    exact = [n * f for f in fractions]
    counts = [math.floor(e + 1e-9) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset, spec):
    """Partition ``range(len(dataset))`` into sorted (train, val, test) index arrays.

    ``random``: seeded permutation cut at the fraction boundaries.
    ``group``: whole groups, largest first (seeded order among equal sizes), each
    sent to the part currently furthest below its target count.
    """
    n = len(dataset)
    rng = np.random.default_rng(spec.seed)
    targets = target_counts(n, spec.fractions)
    if spec.strategy == "random":
        if min(targets) < 1:
            raise InfeasibleSplitError(f"{n} rows cannot fill every part with fractions {spec.fractions}")
        perm = rng.permutation(n)
        cuts = np.cumsum(targets)[:-1]
        parts = np.split(perm, cuts)
    else:
        if dataset.group_ids is None:
            raise InputError("group split requires group_ids")
        parts = _group_split(dataset.group_ids, targets, rng)
        for name, part in zip(("train", "val", "test"), parts):
            if part.size == 0:
                raise InfeasibleSplitError(
                    f"group split leaves the {name} part empty (targets {targets}, "
                    f"largest group {np.bincount(dataset.group_ids).max()})"
                )
    return tuple(np.sort(p) for p in parts)


def _group_split(group_ids, targets, rng):
    labels, inverse, sizes = np.unique(group_ids, return_inverse=True, return_counts=True)
    shuffled = rng.permutation(len(labels))
    order = shuffled[np.argsort(-sizes[shuffled], kind="stable")]
    fill = [0, 0, 0]
    assignment = np.empty(len(labels), dtype=np.int64)
    for g in order:
        deficits = [t - f for t, f in zip(targets, fill)]
        part = int(np.argmax(deficits))
        assignment[g] = part
        fill[part] += sizes[g]
    row_part = assignment[inverse]
    return [np.flatnonzero(row_part == k) for k in range(3)]


def bootstrap_indices(n, seed):
    """``n`` indices drawn uniformly with replacement from ``[0, n)``."""
    if n < 1:
        raise InputError(f"bootstrap needs n >= 1, got {n}")
    return np.random.default_rng(seed).integers(0, n, size=n)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Heteroscedastic toy problem with known noise level.

    ``mean_fn``: ``"sines"`` (sum of sin over features) or ``"polynomial"``.
    ``noise_fn``: ``"constant"`` (sigma = noise_base) or ``"affine"``
    (sigma = noise_base + noise_slope * ||x|| / sqrt(d)).
    ``groups``: ``"none"`` (uniform features on [-extent, extent]^d) or
    ``"clusters"`` (n_groups Gaussian blobs whose index is the group id).
    """

    n: int = 1000
    d: int = 2
    mean_fn: str = "sines"
    noise_fn: str = "affine"
    noise_base: float = 0.05
    noise_slope: float = 0.5
    groups: str = "none"
    n_groups: int = 20
    cluster_std: float = 0.3
    extent: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError("synthetic n and d must be positive")
        if self.mean_fn not in _MEAN_FNS:
            raise ConfigError(f"unknown mean function {self.mean_fn!r}")
        if self.noise_fn not in ("constant", "affine"):
            raise ConfigError(f"unknown noise function {self.noise_fn!r}")
        if self.groups not in ("none", "clusters"):
            raise ConfigError(f"unknown group structure {self.groups!r}")
        if not self.noise_base > 0 or self.noise_slope < 0:
            raise ConfigError("noise_base must be positive and noise_slope non-negative")
        if self.groups == "clusters" and self.n_groups < 1:
            raise ConfigError("clusters need n_groups >= 1")


def _sines(x):
    return np.sin(x).sum(axis=1)


def _polynomial(x):
    return 0.5 * (x**2).sum(axis=1) - x.sum(axis=1)


_MEAN_FNS = {"sines": _sines, "polynomial": _polynomial}


def true_mean(spec, x):
    return _MEAN_FNS[spec.mean_fn](np.asarray(x, dtype=np.float64))


def true_sigma(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if spec.noise_fn == "constant":
        return np.full(x.shape[0], spec.noise_base)
    return spec.noise_base + spec.noise_slope * np.linalg.norm(x, axis=1) / math.sqrt(spec.d)


def generate_synthetic(spec):
    """Return ``(dataset, sigma)`` with ``y = f(x) + eps``, ``eps ~ N(0, sigma(x)^2)``."""
    rng = derived_rng(spec.seed, 0)
    group_ids = None
    if spec.groups == "clusters":
        centers = rng.uniform(-spec.extent, spec.extent, size=(spec.n_groups, spec.d))
        group_ids = rng.integers(0, spec.n_groups, size=spec.n)
        x = centers[group_ids] + spec.cluster_std * rng.standard_normal((spec.n, spec.d))
    else:
        x = rng.uniform(-spec.extent, spec.extent, size=(spec.n, spec.d))
    sigma = true_sigma(spec, x)
    y = true_mean(spec, x) + sigma * rng.standard_normal(spec.n)
    return Dataset(x, y, group_ids, target_units="synthetic"), sigma
