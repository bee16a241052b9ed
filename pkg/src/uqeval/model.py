"""Feed-forward regressor with a heteroscedastic (mean, log-variance) head.

Everything here is plain numpy: explicit forward and backward passes, inverted
dropout on hidden activations, weight decay or anchored L2 regularisation,
minibatch SGD with momentum and early stopping on validation NLL.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``X`` of shape
``(n, fan_in)`` maps through ``X @ W + b``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write, derived_rng
from .errors import ConfigError, FormatError, InputError, TrainingDivergenceError

LOGVAR_MIN = -15.0
LOGVAR_MAX = 15.0
MODEL_MAGIC = b"UQEVAL-MODEL-v1"

_INIT_STREAM = 0
_ANCHOR_STREAM = 1


@dataclass(frozen=True)
class AnchorConfig:
    """Isotropic Gaussian prior the anchor point is drawn from, and its L2 strength."""

    prior_std: float
    lam: float

    def __post_init__(self):
        if not self.prior_std > 0:
            raise ConfigError(f"anchor prior_std must be positive, got {self.prior_std}")
        if not self.lam >= 0:
            raise ConfigError(f"anchor lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    max_epochs: int = 300
    patience: int = 30
    weight_decay: float = 0.0
    anchor: AnchorConfig | None = None
    batch_size: int = 64
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("max_epochs, patience and batch_size must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.anchor is not None and self.weight_decay > 0:
            raise ConfigError("weight decay and anchored regularisation are mutually exclusive")

    @property
    def reg_strength(self):
        return self.anchor.lam if self.anchor is not None else self.weight_decay

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return TrainConfig(**fields)


@dataclass
class HeteroModel:
    """MLP with ReLU hidden layers and a two-unit output (mean, log-variance).

    ``anchor`` holds the anchor point theta_0 (same layout as ``params``) when the
    model was initialised for anchored regularisation. The ``x_*``/``y_*`` fields
    describe the input/target standardisation fitted during training; the
    network itself always works in standardised units.
    """

    layer_dims: tuple
    weights: list
    biases: list
    dropout_rate: float = 0.0
    seed: int | None = None
    anchor: list | None = None
    x_shift: np.ndarray = None
    x_scale: np.ndarray = None
    y_shift: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        d_in = self.layer_dims[0]
        if self.x_shift is None:
            self.x_shift = np.zeros(d_in)
        if self.x_scale is None:
            self.x_scale = np.ones(d_in)
        _check_shapes(self)

    @property
    def hidden_dims(self):
        return self.layer_dims[1:-1]

    @property
    def params(self):
        """Parameters in canonical order ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        twin = copy.deepcopy(self)
        if twin.anchor is not None:
            _freeze(twin.anchor)
        return twin


def _check_shapes(model):
    dims = model.layer_dims
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"invalid layer_dims {dims}")
    if dims[-1] != 2:
        raise ConfigError(f"output layer must have 2 units (mean, log-variance), got {dims[-1]}")
    if not 0 <= model.dropout_rate < 1:
        raise ConfigError(f"dropout_rate must lie in [0, 1), got {model.dropout_rate}")
    if len(model.weights) != len(dims) - 1 or len(model.biases) != len(dims) - 1:
        raise ConfigError("number of weight matrices does not match layer_dims")
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
            raise ConfigError(f"layer {i} has shapes {w.shape}/{b.shape}, expected {(dims[i], dims[i + 1])}")
    if model.anchor is not None:
        if [a.shape for a in model.anchor] != [p.shape for p in model.params]:
            raise ConfigError("anchor point shape does not match the model parameters")


def init_model(layer_dims, dropout_rate=0.0, seed=0, anchor=None):
    """Glorot-uniform weights, zero biases; draws theta_0 from N(0, prior_std^2) if ``anchor`` is given."""
    layer_dims = tuple(int(d) for d in layer_dims)
    rng = derived_rng(seed, _INIT_STREAM)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    model = HeteroModel(layer_dims, weights, biases, dropout_rate=dropout_rate, seed=seed)
    if anchor is not None:
        arng = derived_rng(seed, _ANCHOR_STREAM)
        model.anchor = _freeze([arng.normal(0.0, anchor.prior_std, size=p.shape) for p in model.params])
    return model


def _freeze(arrays):
    for a in arrays:
        a.setflags(write=False)
    return arrays


# ---------------------------------------------------------------------------
# forward / loss / backward
# ---------------------------------------------------------------------------

def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise InputError(f"input has shape {x.shape}, expected (*, {model.layer_dims[0]})")
    return x, single


def _check_masks(model, masks):
    if masks is None:
        return
    hidden = model.hidden_dims
    if len(masks) != len(hidden):
        raise InputError(f"expected {len(hidden)} dropout masks, got {len(masks)}")
    for m, width in zip(masks, hidden):
        if np.shape(m)[-1] != width:
            raise InputError(f"dropout mask of width {np.shape(m)[-1]} for hidden layer of width {width}")


def _forward_cache(model, x, masks):
    """Return the raw (n, 2) output plus layer inputs and hidden pre-activations."""
    inputs, pre = [], []
    a = x
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        z = a @ w + b
        if i == n_layers - 1:
            return z, inputs, pre
        pre.append(z)
        a = np.maximum(z, 0.0)
        if masks is not None:
            a = a * masks[i]


def forward(model, x, mask=None):
    """Network output ``(mean, log_var)`` in the model's working (standardised) units.

    ``x`` may be a single feature vector or an ``(n, d)`` batch. ``mask`` is an
    optional list with one dropout mask per hidden layer, entries in
    ``{0, 1/(1-p)}``; a 1-D mask is shared by every row of the batch. Without a
    mask no dropout is applied.
    """
    x, single = _as_batch(model, x)
    _check_masks(model, mask)
    out, _, _ = _forward_cache(model, x, mask)
    mean = out[:, 0]
    log_var = np.clip(out[:, 1], LOGVAR_MIN, LOGVAR_MAX)
    if single:
        return float(mean[0]), float(log_var[0])
    return mean, log_var


def predict(model, x, mask=None):
    """Mean and aleatoric variance in original target units."""
    x, single = _as_batch(model, x)
    mean, log_var = forward(model, (x - model.x_shift) / model.x_scale, mask)
    mean = model.y_shift + model.y_scale * mean
    var = np.exp(log_var) * model.y_scale**2
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def gaussian_nll_loss(mean, log_var, target):
    """Heteroscedastic Gaussian NLL without the constant: (y-mu)^2 / (2 sigma^2) + log(sigma^2) / 2.

    Scalar inputs give a scalar; arrays give the mean over samples.
    """
    mean, log_var, target = (np.asarray(v, dtype=np.float64) for v in (mean, log_var, target))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var)) and np.all(np.isfinite(target))):
        raise InputError("gaussian_nll_loss received non-finite input")
    return _nll(mean, log_var, target)


def _nll(mean, log_var, target):
    return float(np.mean(0.5 * np.exp(-log_var) * (target - mean) ** 2 + 0.5 * log_var))


def gaussian_nll_grad(mean, log_var, target):
    """Per-sample derivatives of the NLL w.r.t. ``mean`` and ``log_var``."""
    mean, log_var, target = (np.asarray(v, dtype=np.float64) for v in (mean, log_var, target))
    inv_var = np.exp(-log_var)
    resid = target - mean
    return -inv_var * resid, 0.5 - 0.5 * inv_var * resid**2


def regularizer(model, config, n_total):
    """(lambda / N) * ||theta - theta_0||^2 with theta_0 = 0 for plain weight decay."""
    lam = config.reg_strength
    if lam == 0:
        return 0.0
    anchor = _anchor_point(model, config)
    return lam / n_total * sum(float(np.sum((p - a) ** 2)) for p, a in zip(model.params, anchor))


def _anchor_point(model, config):
    if config.anchor is None:
        return [0.0] * len(model.params)
    if model.anchor is None:
        raise ConfigError("anchored regularisation requested but the model has no anchor point")
    return model.anchor


def backward(model, x, y, config, n_total=None, masks=None):
    """Loss and gradients for one batch.

    The loss is the batch-mean NLL plus ``regularizer(model, config, n_total)``;
    ``n_total`` is the N of the regulariser prefactor and defaults to the batch
    size. Returns ``(loss, grads)`` with ``grads`` aligned with ``model.params``.
    """
    x, _ = _as_batch(model, x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if n == 0 or y.shape[0] != n:
        raise InputError(f"batch has {n} inputs and {y.shape[0]} targets")
    _check_masks(model, masks)
    n_total = n if n_total is None else n_total

    out, inputs, pre = _forward_cache(model, x, masks)
    mean = out[:, 0]
    log_var = np.clip(out[:, 1], LOGVAR_MIN, LOGVAR_MAX)
    loss = _nll(mean, log_var, y) + regularizer(model, config, n_total)

    d_mean, d_logvar = gaussian_nll_grad(mean, log_var, y)
    d_logvar = d_logvar * ((out[:, 1] > LOGVAR_MIN) & (out[:, 1] < LOGVAR_MAX))
    dz = np.stack([d_mean, d_logvar], axis=1) / n

    grads = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = inputs[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        if i == 0:
            break
        da = dz @ model.weights[i].T
        if masks is not None:
            da = da * masks[i - 1]
        dz = da * (pre[i - 1] > 0)

    lam = config.reg_strength
    if lam > 0:
        anchor = _anchor_point(model, config)
        grads = [g + 2.0 * lam / n_total * (p - a) for g, p, a in zip(grads, model.params, anchor)]
    return loss, grads


def draw_masks(rng, model, n_rows=None):
    """Inverted-dropout masks, one per hidden layer; ``n_rows=None`` gives a single shared row."""
    p = model.dropout_rate
    keep = 1.0 - p
    shape = (lambda w: (w,)) if n_rows is None else (lambda w: (n_rows, w))
    return [(rng.random(shape(w)) < keep) / keep for w in model.hidden_dims]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    """Per-epoch losses in standardised units (NLL + regulariser for train, NLL for validation)."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self):
        return len(self.train_loss)


def _fit_standardizer(model, x, y):
    x_scale = x.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    y_scale = float(y.std()) or 1.0
    model.x_shift = x.mean(axis=0)
    model.x_scale = x_scale
    model.y_shift = float(y.mean())
    model.y_scale = y_scale


def _unpack(dataset, model):
    x, y = dataset
    x, _ = _as_batch(model, x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise InputError(f"dataset with {x.shape[0]} rows and {y.shape[0]} targets")
    return x, y


def train(model, train_set, val_set, config):
    """Minibatch SGD with momentum and early stopping on validation NLL.

    ``train_set`` and ``val_set`` are ``(features, targets)`` pairs. The input
    model is left untouched; a trained copy carrying the weights of the best
    validation epoch is returned together with the :class:`TrainHistory`.
    """
    model = model.copy()
    x_tr, y_tr = _unpack(train_set, model)
    x_va, y_va = _unpack(val_set, model)
    if config.standardize:
        _fit_standardizer(model, x_tr, y_tr)
    x_tr = (x_tr - model.x_shift) / model.x_scale
    x_va = (x_va - model.x_shift) / model.x_scale
    y_tr = (y_tr - model.y_shift) / model.y_scale
    y_va = (y_va - model.y_shift) / model.y_scale

    rng = np.random.default_rng(config.seed)
    n = x_tr.shape[0]
    velocity = [np.zeros_like(p) for p in model.params]
    history = TrainHistory()
    best_val, best_params = math.inf, [p.copy() for p in model.params]

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                masks = draw_masks(rng, model, len(idx)) if model.dropout_rate > 0 else None
                loss, grads = backward(model, x_tr[idx], y_tr[idx], config, n_total=n, masks=masks)
                if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                    raise TrainingDivergenceError(epoch)
                running += loss * len(idx)
                for p, v, g in zip(model.params, velocity, grads):
                    v *= config.momentum
                    v -= config.learning_rate * g
                    p += v
            mean_va, logvar_va = forward(model, x_va)
            if not (np.all(np.isfinite(mean_va)) and np.all(np.isfinite(logvar_va))):
                raise TrainingDivergenceError(epoch, detail="non-finite validation output")
        val = gaussian_nll_loss(mean_va, logvar_va, y_va)
        history.train_loss.append(running / n)
        history.val_loss.append(val)
        if val < best_val:
            best_val = val
            best_params = [p.copy() for p in model.params]
            history.best_epoch = epoch
        elif epoch - history.best_epoch >= config.patience:
            break

    for p, best in zip(model.params, best_params):
        p[...] = best
    return model, history


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Write a versioned checkpoint: magic line, JSON header line, little-endian float64 payload."""
    arrays = list(model.params) + (list(model.anchor) if model.anchor is not None else [])
    header = {
        "layer_dims": list(model.layer_dims),
        "dropout_rate": model.dropout_rate,
        "seed": model.seed,
        "has_anchor": model.anchor is not None,
        "dtype": "<f8",
        "order": "row-major",
        "x_shift": [float(v) for v in model.x_shift],
        "x_scale": [float(v) for v in model.x_scale],
        "y_shift": float(model.y_shift),
        "y_scale": float(model.y_scale),
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C") for a in arrays)
    header["payload_bytes"] = len(payload)
    data = MODEL_MAGIC + b"\n" + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    atomic_write(path, data)


def load_model(path):
    raw = Path(path).read_bytes()
    magic, sep, rest = raw.partition(b"\n")
    if magic != MODEL_MAGIC or not sep:
        raise FormatError(f"{path}: not a {MODEL_MAGIC.decode()} checkpoint (header {magic[:32]!r})")
    head, sep, payload = rest.partition(b"\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    if not sep or len(payload) != header.get("payload_bytes"):
        raise FormatError(f"{path}: checkpoint payload is truncated")
    dims = header["layer_dims"]
    shapes = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        shapes.extend([(fan_in, fan_out), (fan_out,)])
    if header["has_anchor"]:
        shapes = shapes + shapes
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if flat.size != sum(math.prod(s) for s in shapes):
        raise FormatError(f"{path}: payload size does not match layer_dims {dims}")
    arrays, offset = [], 0
    for s in shapes:
        size = math.prod(s)
        arrays.append(flat[offset:offset + size].reshape(s).copy())
        offset += size
    n_params = 2 * (len(dims) - 1)
    params, anchor = arrays[:n_params], arrays[n_params:] or None
    return HeteroModel(
        layer_dims=tuple(dims),
        weights=params[0::2],
        biases=params[1::2],
        dropout_rate=header["dropout_rate"],
        seed=header["seed"],
        anchor=_freeze(anchor) if anchor is not None else None,
        x_shift=np.asarray(header["x_shift"], dtype=np.float64),
        x_scale=np.asarray(header["x_scale"], dtype=np.float64),
        y_shift=header["y_shift"],
        y_scale=header["y_scale"],
    )
