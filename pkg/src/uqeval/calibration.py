"""Regression calibration: interval coverage (AUCE/MCE/ECE), error-based bins (ENCE), dispersion."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write
from .errors import ConfigError, DegenerateUncertaintyError, InputError

DEFAULT_K = {"confidence": 100, "error": 10}

# Acklam's rational approximation to the normal quantile (relative error ~1.15e-9)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def _poly(coeffs, x):
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def normal_cdf(x):
    return 0.5 * math.erfc(-x / _SQRT2)


def _lower_quantile(p):
    """Quantile for 0 < p <= 0.5, where p - Phi(x) can be evaluated without cancellation."""
    if p < _P_LOW:
        t = math.sqrt(-2.0 * math.log(p))
        x = _poly(_C, t) / (_poly(_D, t) * t + 1.0)
    else:
        t = p - 0.5
        r = t * t
        x = _poly(_A, r) * t / (_poly(_B, r) * r + 1.0)
    # one Newton step against the erfc-based CDF
    density = math.exp(-0.5 * x * x) / _SQRT2PI
    return x - (normal_cdf(x) - p) / density


def _quantile(p):
    p = float(p)
    if not 0.0 < p < 1.0:
        raise InputError(f"inverse_normal_cdf needs 0 < p < 1, got {p}")
    if p > 0.5:
        return -_lower_quantile(1.0 - p)
    return _lower_quantile(p)


def inverse_normal_cdf(p):
    """Standard normal quantile function; accepts a scalar or an array."""
    if np.ndim(p) == 0:
        return _quantile(p)
    p = np.asarray(p, dtype=np.float64)
    return np.array([_quantile(v) for v in p.ravel()]).reshape(p.shape)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationConfig:
    """``K`` confidence levels (mode ``confidence``) or equal-count bins (mode ``error``)."""

    mode: str = "confidence"
    K: int | None = None

    def __post_init__(self):
        if self.mode not in DEFAULT_K:
            raise ConfigError(f"calibration mode must be one of {tuple(DEFAULT_K)}")
        k = DEFAULT_K[self.mode] if self.K is None else int(self.K)
        if k < 2:
            raise ConfigError(f"K must be at least 2, got {k}")
        object.__setattr__(self, "K", k)


@dataclass(frozen=True)
class CoverageCurve:
    levels: np.ndarray
    empirical_coverage: np.ndarray


@dataclass(frozen=True)
class ErrorCalibrationBins:
    mean_var: np.ndarray
    mse: np.ndarray
    counts: np.ndarray


def _arrays(pred_mean, pred_var, targets):
    arrs = [np.asarray(a, dtype=np.float64).reshape(-1) for a in (pred_mean, pred_var, targets)]
    n = arrs[0].shape[0]
    if n == 0 or any(a.shape[0] != n for a in arrs):
        raise InputError("pred_mean, pred_var and targets must be non-empty and equally long")
    if not all(np.all(np.isfinite(a)) for a in arrs):
        raise InputError("calibration inputs must be finite")
    if np.any(arrs[1] < 0):
        raise InputError("predicted variances must be non-negative")
    return arrs


def confidence_levels(K):
    return np.arange(1, K + 1) / (K + 1)


# ---------------------------------------------------------------------------
# confidence-interval calibration
# ---------------------------------------------------------------------------

def _covered_fraction(abs_resid, std, z):
    covered = abs_resid[None, :] <= z[:, None] * std[None, :]
    return covered.mean(axis=1)


def coverage_curve(pred_mean, pred_var, targets, config=CalibrationConfig(), strict=True):
    """Fraction of targets inside the symmetric Gaussian interval at levels p_k = k / (K + 1).

    With ``strict=False`` zero variances are accepted: such a sample counts as
    covered only when its residual is exactly zero.
    """
    if config.mode != "confidence":
        raise ConfigError("coverage_curve needs a confidence-mode CalibrationConfig")
    mean, var, y = _arrays(pred_mean, pred_var, targets)
    if strict and np.any(var <= 0):
        raise InputError("coverage_curve needs strictly positive variances")
    levels = confidence_levels(config.K)
    z = inverse_normal_cdf((1.0 + levels) / 2.0)
    return CoverageCurve(levels, _covered_fraction(np.abs(y - mean), np.sqrt(var), z))


def coverage_at(pred_mean, pred_var, targets, level):
    """Empirical coverage of the single central interval with confidence ``level``."""
    mean, var, y = _arrays(pred_mean, pred_var, targets)
    z = np.array([inverse_normal_cdf((1.0 + level) / 2.0)])
    return float(_covered_fraction(np.abs(y - mean), np.sqrt(var), z)[0])


def auce_mce(curve):
    """(sum_k |coverage_k - p_k|, max_k |coverage_k - p_k|)."""
    gap = np.abs(curve.empirical_coverage - curve.levels)
    return float(np.sum(gap)), float(np.max(gap))


def ece(curve):
    """AUCE with every level weighted 1/K."""
    return auce_mce(curve)[0] / len(curve.levels)


# ---------------------------------------------------------------------------
# error-based calibration
# ---------------------------------------------------------------------------

def error_calibration(pred_mean, pred_var, targets, config=CalibrationConfig("error"), root=False):
    """Equal-count bins ordered by predicted variance; returns ``(bins, ence)``.

    ENCE = mean_k |MV_k - MSE_k| / MV_k. ``root=True`` uses the RMV/RMSE
    form instead: mean_k |sqrt(MV_k) - sqrt(MSE_k)| / sqrt(MV_k).
    """
    if config.mode != "error":
        raise ConfigError("error_calibration needs an error-mode CalibrationConfig")
    mean, var, y = _arrays(pred_mean, pred_var, targets)
    n, k = var.shape[0], config.K
    if k > n / 2:
        raise InputError(f"{k} bins need at least {2 * k} samples, got {n}")
    order = np.argsort(var, kind="stable")
    sq_err = (y - mean) ** 2
    chunks = np.array_split(order, k)
    mv = np.array([var[c].mean() for c in chunks])
    mse = np.array([sq_err[c].mean() for c in chunks])
    counts = np.array([c.size for c in chunks])
    if np.any(mv == 0):
        raise DegenerateUncertaintyError(f"bins {np.flatnonzero(mv == 0).tolist()} have zero mean variance")
    if root:
        gaps = np.abs(np.sqrt(mv) - np.sqrt(mse)) / np.sqrt(mv)
    else:
        gaps = np.abs(mv - mse) / mv
    return ErrorCalibrationBins(mv, mse, counts), float(np.mean(gaps))


def dispersion(uncertainty_std):
    """Coefficient of variation (population std / mean) of predicted standard deviations."""
    s = np.asarray(uncertainty_std, dtype=np.float64).reshape(-1)
    if s.size == 0 or not np.all(np.isfinite(s)) or np.any(s < 0):
        raise InputError("dispersion needs a non-empty vector of finite, non-negative standard deviations")
    mu = float(s.mean())
    if mu == 0:
        raise DegenerateUncertaintyError("dispersion undefined for all-zero uncertainty")
    return float(s.std()) / mu


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_coverage_csv(path, curve):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["level", "empirical_coverage", "abs_gap"])
    for p, c in zip(curve.levels, curve.empirical_coverage):
        writer.writerow([repr(float(p)), repr(float(c)), repr(float(abs(c - p)))])
    atomic_write(path, buf.getvalue())


def write_error_bins_csv(path, bins):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_index", "mean_variance", "mse", "count"])
    for i, (mv, mse, c) in enumerate(zip(bins.mean_var, bins.mse, bins.counts)):
        writer.writerow([i, repr(float(mv)), repr(float(mse)), int(c)])
    atomic_write(path, buf.getvalue())
