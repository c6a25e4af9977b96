"""Victim-model zoo: declarative layer stacks, training, prediction, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array

from . import autodiff as ad
from .errors import (
    ConfigurationError,
    DomainError,
    NotTrainedError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .signal import N_CLASSES, WINDOW_LENGTH

log = logging.getLogger(__name__)

INPUT_SHAPE = (1, WINDOW_LENGTH)
NORM_KINDS = frozenset({"bn", "dn"})
LAYER_KINDS = frozenset({"conv", "bn", "dn", "relu", "pool", "flatten", "dense"})
CHECKPOINT_MAGIC = "vibattack-checkpoint/1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop("kind"), d)


def conv(filters, kernel, stride=1, padding=0):
    return LayerSpec("conv", {"filters": filters, "kernel": kernel, "stride": stride, "padding": padding})


def pool(width, stride=None):
    return LayerSpec("pool", {"width": width, "stride": width if stride is None else stride})


def dense(units):
    return LayerSpec("dense", {"units": units})


def dn(eps=1e-5):
    return LayerSpec("dn", {"eps": eps})


BN = LayerSpec("bn", {"eps": 1e-5, "momentum": 0.1})
RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates the chain

    @property
    def uses_normalization(self):
        return any(layer.kind in NORM_KINDS for layer in self.layers)

    def kinds(self):
        return [layer.kind for layer in self.layers]

    def shapes(self):
        """Per-sample output shape after every layer, starting from (1, 2048)."""
        shape = INPUT_SHAPE
        out = []
        for i, layer in enumerate(self.layers):
            p, k = layer.params, layer.kind
            where = f"{self.name} layer {i} ({k})"
            if k == "conv":
                if len(shape) != 2:
                    raise ShapeError(f"{where}: needs (channels, length) input, got {shape}")
                L = ad.conv1d_length(shape[1], p["kernel"], p["stride"], p["padding"])
                if L < 1:
                    raise ShapeError(f"{where}: kernel {p['kernel']} does not fit length {shape[1]}")
                shape = (p["filters"], L)
            elif k == "pool":
                if len(shape) != 2 or p["width"] > shape[1]:
                    raise ShapeError(f"{where}: window {p['width']} does not fit input {shape}")
                shape = (shape[0], (shape[1] - p["width"]) // p["stride"] + 1)
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            elif k == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{where}: needs a flat input, got {shape}")
                shape = (p["units"],)
            elif k == "dn" and shape != INPUT_SHAPE:
                raise ShapeError(f"{where}: the DN layer acts on raw (1, {WINDOW_LENGTH}) windows, got {shape}")
            out.append(shape)
        if shape != (N_CLASSES,):
            raise ShapeError(f"{self.name}: final output {shape}, expected ({N_CLASSES},)")
        return out

    def to_dict(self):
        return {"name": self.name, "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(LayerSpec.from_dict(x) for x in d["layers"]))


def _block(filters, kernel, stride=1, padding=0, pool_width=2, norm=True):
    layers = [conv(filters, kernel, stride, padding)]
    if norm:
        layers.append(BN)
    layers.append(RELU)
    if pool_width:
        layers.append(pool(pool_width))
    return layers


def _wdcnn():
    return ModelSpec("wdcnn", (
        *_block(16, 64, stride=16, padding=24),
        *_block(32, 3, padding=1),
        *_block(64, 3, padding=1),
        *_block(64, 3, padding=1),
        *_block(64, 3),
        FLATTEN, dense(100), RELU, dense(N_CLASSES),
    ))


def _lenet1d():
    return ModelSpec("lenet1d", (
        *_block(6, 5, stride=2, padding=2, pool_width=4),
        *_block(16, 5, padding=2, pool_width=4),
        FLATTEN, dense(120), RELU, dense(84), RELU, dense(N_CLASSES),
    ))


def _cnn1d():
    return ModelSpec("cnn1d", (
        *_block(16, 9, stride=4, padding=4, pool_width=4),
        *_block(32, 5, padding=2, pool_width=4),
        *_block(32, 3, padding=1),
        FLATTEN, dense(64), RELU, dense(N_CLASSES),
    ))


def _alexnet1d():
    return ModelSpec("alexnet1d", (
        *_block(16, 11, stride=4, padding=5, pool_width=4, norm=False),
        *_block(32, 5, padding=2, norm=False),
        *_block(48, 3, padding=1, pool_width=0, norm=False),
        *_block(48, 3, padding=1, pool_width=0, norm=False),
        *_block(32, 3, padding=1, norm=False),
        FLATTEN, dense(100), RELU, dense(N_CLASSES),
    ))


REGISTRY = {"wdcnn": _wdcnn, "lenet1d": _lenet1d, "cnn1d": _cnn1d, "alexnet1d": _alexnet1d}


def build(name):
    """Return the :class:`ModelSpec` registered under ``name``."""
    try:
        return REGISTRY[name]()
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(REGISTRY)}") from None


def init_parameters(spec, rng):
    """He-initialized weights (std sqrt(2 / fan_in)), zero biases, unit norm scales."""
    params, buffers = {}, {}
    shape = INPUT_SHAPE
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.shapes())):
        p = layer.params
        if layer.kind == "conv":
            fan_in = shape[0] * p["kernel"]
            params[f"{i}.weight"] = rng.standard_normal((p["filters"], shape[0], p["kernel"])) * np.sqrt(2.0 / fan_in)
            params[f"{i}.bias"] = np.zeros(p["filters"])
        elif layer.kind == "dense":
            params[f"{i}.weight"] = rng.standard_normal((p["units"], shape[0])) * np.sqrt(2.0 / shape[0])
            params[f"{i}.bias"] = np.zeros(p["units"])
        elif layer.kind == "bn":
            c = shape[0]
            params[f"{i}.gamma"] = np.ones((1, c, 1))
            params[f"{i}.beta"] = np.zeros((1, c, 1))
            buffers[f"{i}.running_mean"] = np.zeros((1, c, 1))
            buffers[f"{i}.running_var"] = np.ones((1, c, 1))
        elif layer.kind == "dn":
            params[f"{i}.gamma"] = np.ones((1, 1, 1))
            params[f"{i}.shift"] = np.zeros((1, 1, 1))
            buffers[f"{i}.running_mean"] = np.zeros((1,) + INPUT_SHAPE)
            buffers[f"{i}.running_var"] = np.ones((1,) + INPUT_SHAPE)
        shape = out_shape
    return params, buffers


def forward(spec, params, buffers, x, training=False, dn_mode="batch", momentum=None):
    """Run ``x`` (Tensor of shape (B, 1, 2048)) through ``spec``; returns logits.

    ``params`` maps names to Tensors. In training mode batchnorm layers use
    batch statistics and update ``buffers`` in place; otherwise they use the
    stored running statistics. DN layers use batch statistics unless
    ``dn_mode == 'running'`` (and always in training).
    """
    h = x
    for i, layer in enumerate(spec.layers):
        p, k = layer.params, layer.kind
        if k == "conv":
            h = ad.conv1d(h, params[f"{i}.weight"], params[f"{i}.bias"], p["stride"], p["padding"])
        elif k == "dense":
            h = ad.dense(h, params[f"{i}.weight"], params[f"{i}.bias"])
        elif k == "relu":
            h = ad.relu(h)
        elif k == "pool":
            h = ad.maxpool1d(h, p["width"], p["stride"])
        elif k == "flatten":
            h = ad.flatten(h)
        elif k in NORM_KINDS:
            axes = (0, 2) if k == "bn" else (0,)
            shift = params[f"{i}.beta" if k == "bn" else f"{i}.shift"]
            use_batch = training or (k == "dn" and dn_mode == "batch")
            if use_batch:
                if k == "dn" and h.shape[0] < 2:
                    raise ConfigurationError(
                        "DN batch statistics need at least 2 rows; use dn_mode='running' for single windows"
                    )
                h_in = h
                h = ad.batchnorm(h_in, params[f"{i}.gamma"], shift, p["eps"], axes=axes)
                if training:
                    m = layer.params.get("momentum", 0.1) if momentum is None else momentum
                    mean = h_in.data.mean(axis=axes, keepdims=True)
                    var = h_in.data.var(axis=axes, keepdims=True)
                    buffers[f"{i}.running_mean"] *= 1 - m
                    buffers[f"{i}.running_mean"] += m * mean
                    buffers[f"{i}.running_var"] *= 1 - m
                    buffers[f"{i}.running_var"] += m * var
            else:
                h = ad.batchnorm(h, params[f"{i}.gamma"], shift, p["eps"], axes=axes,
                                 mean=buffers[f"{i}.running_mean"], var=buffers[f"{i}.running_var"])
    return h


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    early_stop: float = 0.999

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class _SGDMomentum:
    def __init__(self, params, lr, momentum=0.9):
        self.lr, self.mu = lr, momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k, g in grads.items():
            self.vel[k] = self.mu * self.vel[k] - self.lr * g
            params[k] += self.vel[k]


def chunks(n, size):
    """Consecutive ``(start, stop)`` row ranges; a trailing single row joins the previous chunk."""
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return list(zip(bounds[:-1], bounds[1:]))


def _as_batch(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim == 3:
        if X.shape[1:] != INPUT_SHAPE:
            raise ShapeError(f"expected input rows of shape {INPUT_SHAPE}, got {X.shape[1:]}")
        return X
    if X.ndim != 2 or X.shape[1] != WINDOW_LENGTH:
        raise ShapeError(f"expected (n, {WINDOW_LENGTH}) windows, got {X.shape}")
    return X[:, None, :]


def _check_labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise DomainError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= N_CLASSES):
        raise DomainError(f"labels must lie in [0, {N_CLASSES - 1}]")
    return y.astype(np.int64)


class FaultClassifier(ClassifierMixin, BaseEstimator):
    """1-D CNN fault classifier over 2048-sample windows.

    Parameters
    ----------
    arch : str or ModelSpec
        Registry name (``wdcnn``, ``lenet1d``, ``cnn1d``, ``alexnet1d``) or an
        explicit spec, e.g. one produced by :func:`vibattack.defense.attach_defense`.
    epochs, batch_size, learning_rate, optimizer
        Mini-batch training settings. Training stops early once validation
        accuracy reaches ``early_stop`` (when validation data is given).
    dn_mode : {'batch', 'running'}
        Statistics used by a DN layer outside training.
    random_state : int
        Seeds initialization and batch order; equal seeds give bit-identical fits.
    """

    def __init__(self, arch="wdcnn", epochs=50, batch_size=64, learning_rate=1e-3,
                 optimizer="adam", early_stop=0.999, dn_mode="batch", random_state=0,
                 verbose=False):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.early_stop = early_stop
        self.dn_mode = dn_mode
        self.random_state = random_state
        self.verbose = verbose

    def _resolve_spec(self):
        return self.arch if isinstance(self.arch, ModelSpec) else build(self.arch)

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotTrainedError(
                f"{type(self).__name__} is not trained; call fit() (or train()) before using it"
            )

    def __sklearn_is_fitted__(self):
        return hasattr(self, "params_")

    def fit(self, X, y, X_val=None, y_val=None):
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.optimizer,
                          self.random_state, self.early_stop)
        if self.dn_mode not in ("batch", "running"):
            raise ConfigurationError(f"dn_mode must be 'batch' or 'running', got {self.dn_mode!r}")
        X = _as_batch(check_array(X, dtype=np.float64) if np.ndim(X) == 2 else X)
        y = _check_labels(y, X.shape[0])
        if X.shape[0] == 0:
            raise ConfigurationError("cannot train on an empty dataset")
        spec = self._resolve_spec()
        rng = np.random.default_rng(cfg.seed)
        params, buffers = init_parameters(spec, rng)
        opt = (_Adam if cfg.optimizer == "adam" else _SGDMomentum)(params, cfg.learning_rate)
        self.spec_ = spec
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = WINDOW_LENGTH
        self.buffers_ = buffers
        self.params_ = params
        self.history_ = []
        min_rows = 2 if any(k == "dn" for k in spec.kinds()) else 1
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(X.shape[0])
            total, seen = 0.0, 0
            for start in range(0, order.size, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if idx.size < min_rows:
                    continue
                tparams = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
                try:
                    logits = forward(spec, tparams, buffers, ad.Tensor(X[idx]), training=True)
                    loss = ad.softmax_cross_entropy(logits, y[idx])
                    ad.backward(loss)
                except NumericError as exc:
                    raise TrainingError(f"training diverged: {exc}", epoch=epoch) from exc
                if not np.isfinite(loss.data):
                    raise TrainingError("non-finite loss", epoch=epoch)
                opt.step(params, {k: t.grad for k, t in tparams.items()})
                total += float(loss.data) * idx.size
                seen += idx.size
            record = {"epoch": epoch, "loss": total / max(seen, 1)}
            if not np.isfinite(record["loss"]):
                raise TrainingError("non-finite loss", epoch=epoch)
            try:
                self._recalibrate(X, rng)
                if X_val is not None:
                    record["val_accuracy"] = self.score(X_val, y_val)
            except NumericError as exc:
                raise TrainingError(f"training diverged: {exc}", epoch=epoch) from exc
            self.history_.append(record)
            if self.verbose:
                log.info("%s epoch %d %s", spec.name, epoch, record)
            if X_val is not None and record["val_accuracy"] >= cfg.early_stop:
                break
        return self

    def _recalibrate(self, X, rng, n_batches=16):
        """Replace running statistics by their average over a few training batches at the current weights."""
        if not any(k in NORM_KINDS for k in self.spec_.kinds()):
            return
        params = self._frozen()
        idx = rng.permutation(X.shape[0])[: n_batches * self.batch_size]
        for k, (a, b) in enumerate(chunks(idx.size, self.batch_size)):
            forward(self.spec_, params, self.buffers_, ad.Tensor(X[idx[a:b]]),
                    training=True, momentum=1.0 / (k + 1))

    def _frozen(self):
        return {k: ad.Tensor(v) for k, v in self.params_.items()}

    def decision_function(self, X):
        """Logits, computed in chunks of ``batch_size`` rows."""
        self._check_fitted()
        X = _as_batch(X)
        params = self._frozen()
        out = [forward(self.spec_, params, self.buffers_, ad.Tensor(X[a:b]), dn_mode=self.dn_mode).data
               for a, b in chunks(X.shape[0], self.batch_size)]
        return np.concatenate(out) if out else np.empty((0, N_CLASSES))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def loss_gradient(self, X, y):
        """Mean cross-entropy over the batch and its gradient w.r.t. the input rows.

        The whole batch goes through one graph, so DN batch statistics couple
        the rows exactly as they do at prediction time. Parameters are untouched.
        """
        self._check_fitted()
        X = _as_batch(X)
        y = _check_labels(y, X.shape[0])
        x = ad.Tensor(X, requires_grad=True)
        loss = ad.softmax_cross_entropy(
            forward(self.spec_, self._frozen(), self.buffers_, x, dn_mode=self.dn_mode), y)
        ad.backward(loss)
        if not np.all(np.isfinite(x.grad)):
            raise NumericError("non-finite input gradient")
        return float(loss.data), x.grad.reshape(X.shape[0], -1)

    def per_row_loss(self, X, y):
        """Cross-entropy of each row, evaluated in ``batch_size`` chunks."""
        p = self.predict_proba(X)
        y = _check_labels(y, p.shape[0])
        return -np.log(np.clip(p[np.arange(y.size), y], 1e-300, None))

    # -- checkpoints -------------------------------------------------------
    def _tensors(self):
        names = sorted(self.params_) + sorted(self.buffers_)
        return [(n, self.params_[n] if n in self.params_ else self.buffers_[n]) for n in names]

    def save(self, path, metadata=None):
        """Write a JSON header line followed by the raw little-endian f64 tensors."""
        self._check_fitted()
        tensors = self._tensors()
        header = {
            "format": CHECKPOINT_MAGIC,
            "spec": self.spec_.to_dict(),
            "estimator": {k: v for k, v in self.get_params().items() if k != "arch"},
            "seed": self.random_state,
            "tensors": [{"name": n, "shape": list(a.shape), "buffer": n in self.buffers_} for n, a in tensors],
            "history": self.history_,
            "metadata": metadata or {},
        }
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
        path = Path(path)
        path.write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)
        return path

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        head, _, payload = raw.partition(b"\n")
        header = json.loads(head)
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path}: not a vibattack checkpoint")
        spec = ModelSpec.from_dict(header["spec"])
        model = cls(arch=spec, **header["estimator"])
        params, buffers, offset = {}, {}, 0
        for entry in header["tensors"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).astype(np.float64)
            offset += 8 * n
            (buffers if entry["buffer"] else params)[entry["name"]] = arr.reshape(entry["shape"])
        if offset != len(payload):
            raise ShapeError(f"{path}: payload size does not match header")
        model.spec_ = spec
        model.params_ = params
        model.buffers_ = buffers
        model.history_ = header.get("history", [])
        model.classes_ = np.arange(N_CLASSES)
        model.n_features_in_ = WINDOW_LENGTH
        model.metadata_ = header.get("metadata", {})
        return model

    def checkpoint_hash(self):
        self._check_fitted()
        h = hashlib.sha256()
        for name, arr in self._tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


TrainedModel = FaultClassifier


def train(spec, dataset, cfg=None, dn_mode="batch"):
    """Fit a :class:`FaultClassifier` for ``spec`` on ``dataset`` and record split accuracies."""
    cfg = cfg or TrainConfig()
    if len(dataset.y_train) == 0:
        raise ConfigurationError("dataset has no training windows")
    spec = build(spec) if isinstance(spec, str) else spec
    model = FaultClassifier(spec, epochs=cfg.epochs, batch_size=cfg.batch_size,
                            learning_rate=cfg.learning_rate, optimizer=cfg.optimizer,
                            early_stop=cfg.early_stop, dn_mode=dn_mode, random_state=cfg.seed)
    has_val = len(dataset.y_val) > 0
    model.fit(dataset.X_train, dataset.y_train,
              dataset.X_val if has_val else None, dataset.y_val if has_val else None)
    model.metrics_ = {
        split: (accuracy(model, *dataset.arrays(split)) if len(dataset.arrays(split)[1]) else float("nan"))
        for split in ("train", "val", "test")
    }
    return model


def predict(model, batch):
    """Class probabilities and argmax labels for ``batch``."""
    proba = model.predict_proba(batch)
    return proba, proba.argmax(axis=1)


def accuracy(model, X, y=None):
    """Fraction of windows classified correctly; ``X`` may be a list of SignalWindow."""
    if y is None:
        y = np.array([int(w.label) for w in X])
        X = np.stack([w.samples for w in X])
    y = np.asarray(y)
    if y.size == 0:
        raise ConfigurationError("accuracy of an empty set is undefined")
    return float(np.mean(model.predict(X) == y))


def grad_input(model, X, y):
    """Gradient of the mean loss w.r.t. each input row (shape of ``X``)."""
    X = np.asarray(X, dtype=np.float64)
    _, g = model.loss_gradient(X, y)
    return g.reshape(X.shape)
