"""Confidence curves and the ranking indices built on them (AUCO, Error Drop, Decrease Ratio)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write
from .errors import ConfigError, InputError

ERROR_METRICS = ("MAE", "RMSE")


@dataclass(frozen=True)
class RankingConfig:
    q: int = 100
    error_metric: str = "MAE"

    def __post_init__(self):
        if self.q < 2:
            raise ConfigError(f"q must be at least 2, got {self.q}")
        if self.error_metric not in ERROR_METRICS:
            raise ConfigError(f"error_metric must be one of {ERROR_METRICS}")


@dataclass(frozen=True)
class ConfidenceCurve:
    """``h[j-1]`` is the error over the ``sizes[j-1]`` most confident predictions, j = 1..q-1.

    ``h[0]`` is the full-set error ``full_error``.
    """

    h: np.ndarray
    full_error: float
    q: int
    error_metric: str
    sizes: tuple = ()


def retained_sizes(n, q):
    """ceil(n * (q - j + 1) / q) for j = 1..q-1, in exact integer arithmetic."""
    return tuple(-(-n * (q - j + 1) // q) for j in range(1, q))


def _error(abs_errors, metric):
    # fsum is correctly rounded, so a subset's error does not depend on element order
    if metric == "MAE":
        return math.fsum(abs_errors.tolist()) / abs_errors.size
    return math.sqrt(math.fsum((abs_errors**2).tolist()) / abs_errors.size)


def _validate(abs_errors, uncertainty, config):
    abs_errors = np.asarray(abs_errors, dtype=np.float64).reshape(-1)
    uncertainty = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
    n = abs_errors.shape[0]
    if uncertainty.shape[0] != n:
        raise InputError(f"{n} errors but {uncertainty.shape[0]} uncertainties")
    if n < config.q:
        raise InputError(f"confidence curve with q={config.q} needs at least q samples, got {n}")
    if not (np.all(np.isfinite(abs_errors)) and np.all(np.isfinite(uncertainty))):
        raise InputError("confidence curve inputs must be finite")
    if np.any(abs_errors < 0):
        raise InputError("absolute errors must be non-negative")
    return abs_errors, uncertainty


def confidence_curve(abs_errors, uncertainty, config=RankingConfig()):
    """Error over progressively more confident subsets; ties in uncertainty keep index order."""
    abs_errors, uncertainty = _validate(abs_errors, uncertainty, config)
    order = np.argsort(uncertainty, kind="stable")
    ranked = abs_errors[order]
    sizes = retained_sizes(len(ranked), config.q)
    h = np.array([_error(ranked[:s], config.error_metric) for s in sizes])
    full = float(h[0])
    return ConfidenceCurve(h=h, full_error=full, q=config.q, error_metric=config.error_metric, sizes=sizes)


def oracle_curve(abs_errors, config=RankingConfig()):
    """Confidence curve ranked by the true absolute errors: the best achievable curve."""
    return confidence_curve(abs_errors, abs_errors, config)


def auco(curve, oracle):
    """Summed gap between a confidence curve and the oracle curve over j = 1..q-1."""
    if curve.q != oracle.q or curve.error_metric != oracle.error_metric or curve.sizes != oracle.sizes:
        raise InputError("AUCO needs curves with the same q, error metric and prediction set size")
    return float(np.sum(curve.h - oracle.h))


def error_drop(curve):
    """h_1 / h_{q-1}; +inf when the most confident subset has zero error (1.0 if all errors are zero)."""
    first, last = float(curve.h[0]), float(curve.h[-1])
    if last == 0:
        return 1.0 if first == 0 else math.inf
    return first / last


def decrease_ratio(curve):
    """Fraction of non-increasing consecutive pairs in (full_error, h_1, ..., h_{q-1})."""
    seq = np.concatenate(([curve.full_error], np.asarray(curve.h, dtype=np.float64)))
    return float(np.count_nonzero(seq[:-1] >= seq[1:])) / (len(seq) - 1)


def write_curve_csv(path, curve, oracle, n):
    """Columns: quantile_index, retained_fraction, error, oracle_error, confidence_oracle_gap."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["quantile_index", "retained_fraction", "error", "oracle_error", "confidence_oracle_gap"])
    for j, (size, h, ho) in enumerate(zip(curve.sizes, curve.h, oracle.h), start=1):
        writer.writerow([j, repr(size / n), repr(float(h)), repr(float(ho)), repr(float(h - ho))])
    atomic_write(path, buf.getvalue())
