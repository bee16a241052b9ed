"""MC-Dropout, deep ensembles and bootstrap ensembles on top of :mod:`uqeval.model`.

All three produce a stack of member outputs (means and aleatoric variances)
which :func:`aggregate` turns into a predictive mean plus aleatoric, epistemic
and total variance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write, canonical_json, derived_rng, sha256_bytes, sha256_file
from .data import bootstrap_indices
from .errors import ConfigError, FormatError, InputError, TrainingDivergenceError
from .model import TrainConfig, draw_masks, init_model, load_model, predict, save_model, train

METHODS = ("mc_dropout", "ensemble", "bootstrap")
DEFAULT_MEMBERS = {"mc_dropout": 150, "ensemble": 15, "bootstrap": 15}
MANIFEST_FORMAT = "UQEVAL-ENSEMBLE-v1"

_BOOTSTRAP_STREAM = 2


@dataclass(frozen=True)
class EnsembleConfig:
    """``members`` is the number of stochastic passes for MC-Dropout and of trained models otherwise.

    ``hidden`` and ``dropout_rate`` fix the member architecture; ``dropout_rate``
    must be positive for MC-Dropout.
    """

    method: str = "ensemble"
    members: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    member_seeds: tuple | None = None
    hidden: tuple = (64, 64)
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        members = DEFAULT_MEMBERS[self.method] if self.members is None else int(self.members)
        if members < 2:
            raise ConfigError(f"need at least 2 members, got {members}")
        object.__setattr__(self, "members", members)
        seeds = self.member_seeds
        if seeds is None:
            seeds = tuple(self.train.seed + i for i in range(members))
        seeds = tuple(int(s) for s in seeds)
        if len(seeds) != members:
            raise ConfigError(f"{len(seeds)} member seeds for {members} members")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"member seeds must be pairwise distinct, got {seeds}")
        if any(s < 0 for s in seeds):
            raise ConfigError("member seeds must be non-negative")
        object.__setattr__(self, "member_seeds", seeds)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.method == "mc_dropout" and not self.dropout_rate > 0:
            raise ConfigError("mc_dropout needs dropout_rate > 0")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")


@dataclass
class MemberOutputs:
    means: np.ndarray
    ale_vars: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.ale_vars = np.atleast_2d(np.asarray(self.ale_vars, dtype=np.float64))
        if self.means.shape != self.ale_vars.shape:
            raise InputError(f"means {self.means.shape} and ale_vars {self.ale_vars.shape} differ in shape")
        if not np.all(self.ale_vars > 0):
            raise InputError("member aleatoric variances must be strictly positive")

    @property
    def n_members(self):
        return self.means.shape[0]


@dataclass
class UQPredictions:
    mean: np.ndarray
    ale: np.ndarray
    epi: np.ndarray
    total: np.ndarray

    def variance(self, kind):
        """Select ``"aleatoric"``, ``"epistemic"`` or ``"total"`` variance."""
        try:
            return {"aleatoric": self.ale, "epistemic": self.epi, "total": self.total}[kind]
        except KeyError:
            raise InputError(f"unknown uncertainty kind {kind!r}") from None


def aggregate(outputs, ddof=0):
    """Combine member outputs: mean of means, variance of means, mean of aleatoric variances.

    ``ddof=0`` (population variance) is the default; ``ddof=1`` is available for
    sensitivity checks.
    """
    m = outputs.n_members
    if m < 2:
        raise ConfigError(f"aggregation needs at least 2 members, got {m}")
    mean = outputs.means.mean(axis=0)
    # centring on one member first makes agreeing members give exactly zero
    epi = (outputs.means - outputs.means[0]).var(axis=0, ddof=ddof)
    ale = outputs.ale_vars.mean(axis=0)
    return UQPredictions(mean=mean, ale=ale, epi=epi, total=ale + epi)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def mc_dropout_predict(model, inputs, n_samples, seed, masks=None):
    """``n_samples`` stochastic passes, each with one fresh mask set shared by the whole batch.

    ``masks`` (a list of per-pass mask lists) overrides the random draw.
    """
    if not model.dropout_rate > 0:
        raise ConfigError("MC-Dropout prediction requires a model trained with dropout_rate > 0")
    if n_samples < 2:
        raise ConfigError(f"need at least 2 stochastic passes, got {n_samples}")
    rng = np.random.default_rng(seed)
    means, ale = [], []
    for k in range(n_samples):
        pass_masks = masks[k] if masks is not None else draw_masks(rng, model)
        mu, var = predict(model, inputs, pass_masks)
        means.append(np.atleast_1d(mu))
        ale.append(np.atleast_1d(var))
    return MemberOutputs(np.stack(means), np.stack(ale))


def members_predict(models, inputs):
    """Deterministic (no dropout) predictions of each trained member."""
    preds = [predict(m, inputs) for m in models]
    return MemberOutputs(
        np.stack([np.atleast_1d(p[0]) for p in preds]),
        np.stack([np.atleast_1d(p[1]) for p in preds]),
    )


def predict_outputs(method, models, inputs, n_samples=None, seed=0):
    if method == "mc_dropout":
        return mc_dropout_predict(models[0], inputs, n_samples, seed)
    return members_predict(models, inputs)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _layer_dims(n_features, config):
    return (n_features, *config.hidden, 2)


def _member_train_config(config, seed):
    return config.train.replace(seed=seed)


def _check_disjoint(train_idx, val_idx):
    if train_idx is not None and val_idx is not None:
        if np.intersect1d(train_idx, val_idx).size:
            raise InputError("training and validation sets overlap")


def _train_member(x_tr, y_tr, val, config, k, seed):
    model = init_model(_layer_dims(x_tr.shape[1], config), config.dropout_rate, seed, anchor=config.train.anchor)
    try:
        return train(model, (x_tr, y_tr), val, _member_train_config(config, seed))
    except TrainingDivergenceError as exc:
        raise exc.with_member(k) from exc


def train_ensemble(train_set, val_set, config, train_idx=None, val_idx=None):
    """Train ``config.members`` models on the same data, each from its own seed.

    Returns ``(models, histories)``.
    """
    if config.method != "ensemble":
        raise ConfigError(f"train_ensemble called with method {config.method!r}")
    _check_disjoint(train_idx, val_idx)
    x_tr, y_tr = train_set
    models, histories = [], []
    for k, seed in enumerate(config.member_seeds):
        model, hist = _train_member(np.asarray(x_tr), np.asarray(y_tr), val_set, config, k, seed)
        models.append(model)
        histories.append(hist)
    return models, histories


def member_bootstrap_indices(n, seed):
    return bootstrap_indices(n, derived_rng(seed, _BOOTSTRAP_STREAM).integers(2**63))


def train_bootstrap(train_set, val_set, config, train_idx=None, val_idx=None):
    """Like :func:`train_ensemble`, but member k trains on a bootstrap resample of the training set.

    The validation set is shared and never resampled.
    """
    if config.method != "bootstrap":
        raise ConfigError(f"train_bootstrap called with method {config.method!r}")
    _check_disjoint(train_idx, val_idx)
    x_tr, y_tr = (np.asarray(a) for a in train_set)
    models, histories = [], []
    for k, seed in enumerate(config.member_seeds):
        idx = member_bootstrap_indices(len(y_tr), seed)
        model, hist = _train_member(x_tr[idx], y_tr[idx], val_set, config, k, seed)
        models.append(model)
        histories.append(hist)
    return models, histories


def train_mc_dropout(train_set, val_set, config, train_idx=None, val_idx=None):
    """A single dropout network; its stochastic passes are the members."""
    if config.method != "mc_dropout":
        raise ConfigError(f"train_mc_dropout called with method {config.method!r}")
    _check_disjoint(train_idx, val_idx)
    x_tr, y_tr = (np.asarray(a) for a in train_set)
    model, hist = _train_member(x_tr, y_tr, val_set, config, 0, config.member_seeds[0])
    return [model], [hist]


TRAINERS = {"ensemble": train_ensemble, "bootstrap": train_bootstrap, "mc_dropout": train_mc_dropout}


def train_method(train_set, val_set, config, train_idx=None, val_idx=None):
    return TRAINERS[config.method](train_set, val_set, config, train_idx, val_idx)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(path, method, models, seeds, config_hash, n_samples):
    """Save member checkpoints next to ``path`` and a manifest that pins them by sha256."""
    path = Path(path)
    entries = []
    for k, (model, seed) in enumerate(zip(models, seeds)):
        rel = f"models/member_{k:03d}.ckpt"
        save_model(model, path.parent / rel)
        entries.append({"path": rel, "seed": int(seed), "sha256": sha256_file(path.parent / rel)})
    manifest = {
        "format": MANIFEST_FORMAT,
        "method": method,
        "members": entries,
        "seeds": [int(s) for s in seeds],
        "n_samples": int(n_samples),
        "config_hash": config_hash,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    atomic_write(path, text)
    return manifest, sha256_bytes(text.encode())


def read_manifest(path):
    """Return ``(manifest, models)``; checkpoints are verified against their recorded hashes."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: manifest format {manifest.get('format')!r}, expected {MANIFEST_FORMAT}")
    models = []
    for entry in manifest["members"]:
        ckpt = path.parent / entry["path"]
        if not ckpt.exists():
            raise FormatError(f"{path}: missing checkpoint {entry['path']}")
        if sha256_file(ckpt) != entry["sha256"]:
            raise FormatError(f"{path}: checkpoint {entry['path']} does not match its recorded hash")
        models.append(load_model(ckpt))
    return manifest, models


def config_hash(obj):
    return sha256_bytes(canonical_json(obj).encode())
