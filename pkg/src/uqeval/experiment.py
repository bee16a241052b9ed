"""End-to-end runs: split, train a method, predict with uncertainty decomposition, score everything.

A run is fully described by a :class:`RunConfig` (one JSON or YAML file). Its
output directory holds the resolved config, the split indices, member
checkpoints plus manifest, and after evaluation the metrics summary and the
per-figure CSV exports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import ranking as rk
from ._io import atomic_write, canonical_json, sha256_bytes
from .data import SplitSpec, load_csv, split, write_predictions_csv
from .errors import ConfigError, FormatError, LineageError
from .estimators import EnsembleConfig, aggregate, predict_outputs, read_manifest, train_method, write_manifest
from .model import AnchorConfig, TrainConfig

SUMMARY_FORMAT = "UQEVAL-SUMMARY-v1"
COMPARE_FORMAT = "UQEVAL-COMPARE-v1"
KINDS = ("epistemic", "aleatoric", "total")
INDICES = ("auco", "error_drop", "decrease_ratio", "auce", "mce", "ence", "cv")
INDEX_LABELS = {
    "auco": "AUCO",
    "error_drop": "Error Drop",
    "decrease_ratio": "Decrease Ratio",
    "auce": "AUCE",
    "mce": "MCE",
    "ence": "ENCE",
    "cv": "c_v",
}
SHORT_KINDS = {"ale": "aleatoric", "epi": "epistemic", "total": "total"}

_PREDICT_STREAM_OFFSET = 7919


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataSource:
    path: str
    target: str = "y"
    group: str | None = None
    target_units: str = ""


@dataclass(frozen=True)
class EvalSettings:
    """Levels for interval coverage, bins for ENCE, and the ENCE form (``variance`` or ``root``)."""

    levels: int = 100
    bins: int = 10
    ence_form: str = "variance"

    def __post_init__(self):
        cal.CalibrationConfig("confidence", self.levels)
        cal.CalibrationConfig("error", self.bins)
        if self.ence_form not in ("variance", "root"):
            raise ConfigError(f"ence_form must be 'variance' or 'root', got {self.ence_form!r}")


@dataclass(frozen=True)
class RunConfig:
    data: DataSource
    split: SplitSpec = field(default_factory=SplitSpec)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    ranking: rk.RankingConfig = field(default_factory=rk.RankingConfig)
    calibration: EvalSettings = field(default_factory=EvalSettings)
    out_dir: str = "runs/latest"
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        raw = dict(raw)
        try:
            seed = int(raw.get("seed", 0))
            if seed < 0:
                raise ConfigError("seed must be non-negative")
            data = DataSource(**raw["data"])
            split_spec = SplitSpec(**raw.get("split", {}))
            ens = dict(raw.get("ensemble", {}))
            train_raw = dict(ens.pop("train", {}))
            anchor = train_raw.pop("anchor", None)
            train_raw.setdefault("seed", seed)
            train_cfg = TrainConfig(anchor=AnchorConfig(**anchor) if anchor else None, **train_raw)
            if "member_seeds" in ens and ens["member_seeds"] is not None:
                ens["member_seeds"] = tuple(ens["member_seeds"])
            if "hidden" in ens:
                ens["hidden"] = tuple(ens["hidden"])
            ensemble = EnsembleConfig(train=train_cfg, **ens)
            ranking = rk.RankingConfig(**raw.get("ranking", {}))
            calib = EvalSettings(**raw.get("calibration", {}))
        except KeyError as exc:
            raise ConfigError(f"config is missing section {exc}") from None
        except TypeError as exc:
            raise ConfigError(f"bad config entry: {exc}") from None
        return cls(data, split_spec, ensemble, ranking, calib, raw.get("out_dir", "runs/latest"), seed, str(base_dir))

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            if path.suffix in (".yaml", ".yml"):
                import yaml

                raw = yaml.safe_load(text)
            else:
                raw = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a mapping")
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self):
        train = self.ensemble.train
        return {
            "data": dict(vars(self.data)),
            "split": {"fractions": list(self.split.fractions), "strategy": self.split.strategy, "seed": self.split.seed},
            "ensemble": {
                "method": self.ensemble.method,
                "members": self.ensemble.members,
                "member_seeds": list(self.ensemble.member_seeds),
                "hidden": list(self.ensemble.hidden),
                "dropout_rate": self.ensemble.dropout_rate,
                "train": {
                    "learning_rate": train.learning_rate,
                    "momentum": train.momentum,
                    "max_epochs": train.max_epochs,
                    "patience": train.patience,
                    "weight_decay": train.weight_decay,
                    "anchor": None if train.anchor is None else {"prior_std": train.anchor.prior_std, "lam": train.anchor.lam},
                    "batch_size": train.batch_size,
                    "seed": train.seed,
                    "standardize": train.standardize,
                },
            },
            "ranking": {"q": self.ranking.q, "error_metric": self.ranking.error_metric},
            "calibration": dict(vars(self.calibration)),
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    def with_overrides(self, out_dir=None, seed=None, split_strategy=None):
        raw = self.to_dict()
        if out_dir is not None:
            raw["out_dir"] = str(out_dir)
        if seed is not None:
            raw["seed"] = seed
            raw["ensemble"]["train"]["seed"] = seed
            raw["ensemble"]["member_seeds"] = None
        if split_strategy is not None:
            raw["split"]["strategy"] = split_strategy
        return RunConfig.from_dict(raw, base_dir=self.base_dir)

    @property
    def output(self):
        return Path(self.base_dir) / self.out_dir

    @property
    def data_path(self):
        return Path(self.base_dir) / self.data.path

    def training_hash(self):
        """Identity of everything that determines the trained members."""
        raw = self.to_dict()
        return sha256_bytes(canonical_json({k: raw[k] for k in ("data", "split", "ensemble", "seed")}).encode())

    def lineage(self):
        """Identity of the run up to its split, so in- and out-of-domain runs can be paired."""
        raw = self.to_dict()
        return sha256_bytes(canonical_json({k: raw[k] for k in ("data", "ensemble", "ranking", "calibration", "seed")}).encode())

    def load_dataset(self):
        return load_csv(self.data_path, self.data.target, self.data.group, self.data.target_units)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsSummary:
    """Seven indices per uncertainty kind, plus MAE. ``None`` values are explained in ``flags``."""

    method: str
    domain: str
    mae: float
    n_test: int
    metrics: dict
    flags: dict = field(default_factory=dict)
    lineage: str = ""
    members: int = 0

    def to_json(self):
        doc = {
            "format": SUMMARY_FORMAT,
            "method": self.method,
            "domain": self.domain,
            "n_test": self.n_test,
            "members": self.members,
            "lineage": self.lineage,
            "mae": self.mae,
            "metrics": {k: {i: self.metrics[k][i] for i in INDICES} for k in KINDS},
            "flags": dict(sorted(self.flags.items())),
        }
        return json.dumps(doc, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"unreadable summary: {exc}") from None
        if doc.get("format") != SUMMARY_FORMAT:
            raise FormatError(f"summary format {doc.get('format')!r}, expected {SUMMARY_FORMAT}")
        metrics = doc["metrics"]
        if set(metrics) != set(KINDS) or any(set(metrics[k]) != set(INDICES) for k in KINDS):
            raise FormatError("summary does not hold the expected uncertainty kinds and indices")
        return cls(doc["method"], doc["domain"], doc["mae"], doc["n_test"], metrics, doc["flags"], doc["lineage"], doc["members"])

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def to_text(self):
        lines = [
            f"method: {self.method}   domain: {self.domain}   members: {self.members}   n_test: {self.n_test}",
            f"MAE: {_fmt(self.mae)}",
            "",
            f"{'index':<16}" + "".join(f"{k:>14}" for k in KINDS),
        ]
        for i in INDICES:
            cells = []
            for k in KINDS:
                v = self.metrics[k][i]
                cells.append(_fmt(v) if v is not None else self.flags.get(f"{k}.{i}", "n/a"))
            lines.append(f"{INDEX_LABELS[i]:<16}" + "".join(f"{c:>14}" for c in cells))
        if self.flags:
            lines.append("")
            lines.extend(f"flag {key}: {reason}" for key, reason in sorted(self.flags.items()))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return f"{v:.4f}" if abs(v) < 1e4 else f"{v:.4e}"


@dataclass
class KindReport:
    curve: rk.ConfidenceCurve
    oracle: rk.ConfidenceCurve
    coverage: cal.CoverageCurve
    bins: cal.ErrorCalibrationBins | None


def score_predictions(y_true, preds, ranking=rk.RankingConfig(), settings=EvalSettings()):
    """All seven indices for every uncertainty kind.

    Returns ``(mae, metrics, flags, reports)``. Degenerate uncertainty (all-zero
    variance, typically epistemic with identical members) does not raise: the
    affected cells are reported as documented in ``flags``.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    abs_err = np.abs(y_true - preds.mean)
    mae = float(np.mean(abs_err))
    oracle = rk.oracle_curve(abs_err, ranking)
    metrics, flags, reports = {}, {}, {}
    for kind in KINDS:
        var = preds.variance(kind)
        row = {}
        curve = rk.confidence_curve(abs_err, var, ranking)
        row["auco"] = rk.auco(curve, oracle)
        row["error_drop"] = rk.error_drop(curve)
        row["decrease_ratio"] = rk.decrease_ratio(curve)
        degenerate = bool(np.any(var <= 0))
        coverage = cal.coverage_curve(preds.mean, var, y_true, cal.CalibrationConfig("confidence", settings.levels), strict=not degenerate)
        row["auce"], row["mce"] = cal.auce_mce(coverage)
        if degenerate:
            flags[f"{kind}.auce"] = flags[f"{kind}.mce"] = "degenerate_uncertainty"
        bins = None
        try:
            bins, row["ence"] = cal.error_calibration(
                preds.mean, var, y_true, cal.CalibrationConfig("error", settings.bins), root=settings.ence_form == "root"
            )
        except cal.DegenerateUncertaintyError:
            row["ence"] = None
            flags[f"{kind}.ence"] = "degenerate_uncertainty"
        try:
            row["cv"] = cal.dispersion(np.sqrt(var))
        except cal.DegenerateUncertaintyError:
            row["cv"] = 0.0
            flags[f"{kind}.cv"] = "degenerate_uncertainty"
        for idx, v in row.items():
            if v is not None and math.isinf(v):
                row[idx] = None
                flags[f"{kind}.{idx}"] = "infinite"
        metrics[kind] = row
        reports[kind] = KindReport(curve, oracle, coverage, bins)
    return mae, metrics, flags, reports


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(config):
    """Split, train the configured method and write checkpoints, manifest, split and resolved config.

    Returns ``(manifest_path, manifest_sha256)``.
    """
    out = config.output
    dataset = config.load_dataset()
    train_idx, val_idx, test_idx = split(dataset, config.split)
    models, histories = train_method(dataset.xy(train_idx), dataset.xy(val_idx), config.ensemble, train_idx, val_idx)

    _write_json(out / "config.resolved.json", config.to_dict())
    _write_json(out / "split.json", {
        "strategy": config.split.strategy,
        "seed": config.split.seed,
        "train": train_idx.tolist(),
        "val": val_idx.tolist(),
        "test": test_idx.tolist(),
    })
    _write_json(out / "history.json", [
        {"member": k, "best_epoch": h.best_epoch, "epochs_run": h.epochs_run, "train_loss": h.train_loss, "val_loss": h.val_loss}
        for k, h in enumerate(histories)
    ])
    ens = config.ensemble
    seeds = ens.member_seeds[: len(models)]
    n_samples = ens.members if ens.method == "mc_dropout" else len(models)
    _, digest = write_manifest(out / "manifest.json", ens.method, models, seeds, config.training_hash(), n_samples)
    return out / "manifest.json", digest


def _read_split(path):
    try:
        doc = json.loads(Path(path).read_text())
        return {k: np.asarray(doc[k], dtype=np.int64) for k in ("train", "val", "test")}
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read split indices from {path}: {exc}") from None


def cmd_evaluate(config, selectors=KINDS):
    """Predict on the test split, score all kinds and write summary plus CSV exports.

    ``selectors`` restricts which kinds get curve/calibration CSVs; the summary
    always covers all three kinds. Checkpoints are only read.
    """
    out = config.output
    manifest, models = read_manifest(out / "manifest.json")
    if manifest["config_hash"] != config.training_hash():
        raise ConfigError("manifest was produced by a different training configuration")
    test_idx = _read_split(out / "split.json")["test"]
    dataset = config.load_dataset()
    x_test, y_test = dataset.xy(test_idx)

    outputs = predict_outputs(manifest["method"], models, x_test, manifest["n_samples"], seed=config.seed + _PREDICT_STREAM_OFFSET)
    preds = aggregate(outputs)
    mae, metrics, flags, reports = score_predictions(y_test, preds, config.ranking, config.calibration)
    summary = MetricsSummary(
        method=manifest["method"],
        domain="out" if config.split.strategy == "group" else "in",
        mae=mae,
        n_test=int(len(test_idx)),
        metrics=metrics,
        flags=flags,
        lineage=config.lineage(),
        members=int(manifest["n_samples"]),
    )

    write_predictions_csv(out / "predictions.csv", test_idx, y_test, preds)
    for kind in selectors:
        rep = reports[kind]
        rk.write_curve_csv(out / f"confidence_curve_{kind}.csv", rep.curve, rep.oracle, len(test_idx))
        cal.write_coverage_csv(out / f"calibration_confidence_{kind}.csv", rep.coverage)
        if rep.bins is not None:
            cal.write_error_bins_csv(out / f"calibration_error_{kind}.csv", rep.bins)
    atomic_write(out / "summary.json", summary.to_json())
    atomic_write(out / "summary.txt", summary.to_text())
    return summary


def _ratio(out_v, in_v):
    if out_v is None or in_v is None:
        return None, "non_finite_input"
    if in_v == 0:
        return None, "zero_in_domain"
    return out_v / in_v, None


def cmd_compare(in_summary, out_summary, path=None):
    """Out-of-domain / in-domain ratio for every index, plus the error generalisation ratio (MAE)."""
    if in_summary.method != out_summary.method or in_summary.lineage != out_summary.lineage:
        raise LineageError(
            f"summaries come from different runs (method {in_summary.method}/{out_summary.method}, "
            f"lineage {in_summary.lineage[:12]}/{out_summary.lineage[:12]})"
        )
    ratios, flags = {}, {}
    for kind in KINDS:
        ratios[kind] = {}
        for idx in INDICES:
            key = f"{kind}.{idx}"
            value, reason = _ratio(out_summary.metrics[kind][idx], in_summary.metrics[kind][idx])
            ratios[kind][idx] = value
            if reason:
                flags[key] = reason
    mae_ratio, reason = _ratio(out_summary.mae, in_summary.mae)
    if reason:
        flags["mae"] = reason
    report = {
        "format": COMPARE_FORMAT,
        "method": in_summary.method,
        "lineage": in_summary.lineage,
        "mae_in": in_summary.mae,
        "mae_out": out_summary.mae,
        "error_generalization_ratio": mae_ratio,
        "ratios": ratios,
        "flags": dict(sorted(flags.items())),
    }
    if path is not None:
        atomic_write(path, json.dumps(report, indent=2, allow_nan=False) + "\n")
    return report


def compare_text(report):
    lines = [
        f"method: {report['method']}",
        f"MAE in/out: {_fmt(report['mae_in'])} / {_fmt(report['mae_out'])}"
        f"   ratio: {_fmt(report['error_generalization_ratio']) if report['error_generalization_ratio'] is not None else 'n/a'}",
        "",
        f"{'out/in':<16}" + "".join(f"{k:>14}" for k in KINDS),
    ]
    for idx in INDICES:
        cells = []
        for k in KINDS:
            v = report["ratios"][k][idx]
            cells.append(_fmt(v) if v is not None else report["flags"].get(f"{k}.{idx}", "n/a"))
        lines.append(f"{INDEX_LABELS[idx]:<16}" + "".join(f"{c:>14}" for c in cells))
    return "\n".join(lines) + "\n"


def run(config, selectors=KINDS):
    """Train then evaluate."""
    cmd_train(config)
    return cmd_evaluate(config, selectors)
