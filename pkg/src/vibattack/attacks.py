"""Gradient-sign attacks (FGSM, PGD), untargeted and targeted.

Untargeted attacks ascend the loss of the true label; targeted attacks
descend the loss of the chosen target. Gradients are taken batch-wise in
chunks of the model's ``batch_size`` rows, so a DN layer running on batch
statistics couples rows the same way during the attack as during
prediction. ``np.sign`` maps a zero gradient coordinate to a zero step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError, EvaluationError, NumericError, ShapeError
from .metrics import CostConfig, attack_costs
from .models import chunks
from .signal import N_CLASSES, WINDOW_LENGTH

METHODS = ("fgsm", "pgd")
MODES = ("untargeted", "targeted")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "fgsm"
    mode: str = "untargeted"
    epsilon: float = 0.03
    alpha: float = 0.005
    iterations: int = 20
    clip01: bool = True
    target: int | None = None
    eps_ball: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method == "fgsm" and not self.epsilon >= 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.method == "pgd" and (not self.alpha > 0 or self.iterations < 1):
            raise ConfigurationError("pgd needs alpha > 0 and iterations >= 1")
        if self.target is not None and not 0 <= self.target < N_CLASSES:
            raise DomainError(f"target must lie in [0, {N_CLASSES - 1}], got {self.target}")

    @property
    def targeted(self):
        return self.mode == "targeted"

    def label(self):
        return f"{self.method}-{self.mode}"


@dataclass
class AdvBatch:
    """Adversarial rows paired with their originals.

    ``labels`` are the true classes; ``target`` holds the per-row target for
    targeted attacks (None otherwise). ``success`` follows the attack mode:
    prediction differs from the true label (untargeted) or equals the target.
    """

    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    orig_pred: np.ndarray
    adv_pred: np.ndarray
    success: np.ndarray
    cost: np.ndarray
    target: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.originals.shape != self.adversarials.shape:
            raise ShapeError("originals and adversarials differ in shape")
        self.noise = self.adversarials - self.originals

    def __len__(self):
        return self.originals.shape[0]

    def save(self, stem):
        """Write ``<stem>.json`` metadata plus raw little-endian f64 tensor files."""
        stem = Path(stem)
        files = {}
        for name in ("originals", "adversarials"):
            fname = f"{stem.name}.{name}.f64"
            (stem.parent / fname).write_bytes(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())
            files[name] = fname
        doc = {
            "rows": len(self),
            "length": int(self.originals.shape[1]),
            "files": files,
            "labels": self.labels.tolist(),
            "orig_pred": self.orig_pred.tolist(),
            "adv_pred": self.adv_pred.tolist(),
            "success": self.success.tolist(),
            "cost": [float(c) if np.isfinite(c) else str(c) for c in self.cost],
            "target": None if self.target is None else self.target.tolist(),
            "meta": self.meta,
        }
        path = stem.parent / f"{stem.name}.json"
        path.write_text(json.dumps(doc, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        doc = json.loads(path.read_text())
        shape = (doc["rows"], doc["length"])
        arrays = {
            name: np.frombuffer((path.parent / fname).read_bytes(), dtype="<f8").reshape(shape).astype(np.float64)
            for name, fname in doc["files"].items()
        }
        return cls(
            arrays["originals"], arrays["adversarials"],
            np.array(doc["labels"], dtype=np.int64), np.array(doc["orig_pred"], dtype=np.int64),
            np.array(doc["adv_pred"], dtype=np.int64), np.array(doc["success"], dtype=bool),
            np.array([float(c) for c in doc["cost"]]),
            None if doc["target"] is None else np.array(doc["target"], dtype=np.int64),
            doc["meta"],
        )


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != WINDOW_LENGTH:
        raise ShapeError(f"expected (n, {WINDOW_LENGTH}) windows, got {x.shape}")
    return x


def _labels(y, n):
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,)).copy()
    if n and (y.min() < 0 or y.max() >= N_CLASSES):
        raise DomainError(f"labels must lie in [0, {N_CLASSES - 1}]")
    return y


def input_gradient(model, x, y):
    """Loss gradient w.r.t. every row of ``x``, computed chunk by chunk."""
    g = np.empty_like(x)
    for a, b in chunks(x.shape[0], model.batch_size):
        _, g[a:b] = model.loss_gradient(x[a:b], y[a:b])
    return g


def _sign_step(x, grad, size, targeted):
    # Same expression for FGSM and every PGD iteration so T=1 reproduces FGSM bit for bit.
    return x - size * np.sign(grad) if targeted else x + size * np.sign(grad)


def _finish(model, x, adv, true_labels, target, orig_pred, meta, segment_size):
    adv_pred = model.predict(adv)
    success = adv_pred == target if target is not None else adv_pred != true_labels
    cost = attack_costs(x, adv - x, segment_size)
    return AdvBatch(x, adv, true_labels, orig_pred, adv_pred, success, cost, target, meta)


def fgsm_untargeted(model, x, y, epsilon=0.03, clip01=True, segment_size=256):
    """One signed-gradient ascent step of size ``epsilon`` on the true-label loss."""
    x = _rows(x)
    y = _labels(y, x.shape[0])
    grad = input_gradient(model, x, y)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite input gradient")
    adv = _sign_step(x, grad, epsilon, targeted=False)
    if clip01:
        adv = np.clip(adv, 0.0, 1.0)
    meta = {"method": "fgsm", "mode": "untargeted", "epsilon": epsilon, "clip01": clip01}
    return _finish(model, x, adv, y, None, model.predict(x), meta, segment_size)


def fgsm_targeted(model, x, y_target, epsilon=0.03, clip01=True, y_true=None, segment_size=256):
    """One signed-gradient descent step of size ``epsilon`` on the target-label loss."""
    x = _rows(x)
    target = _labels(y_target, x.shape[0])
    grad = input_gradient(model, x, target)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite input gradient")
    adv = _sign_step(x, grad, epsilon, targeted=True)
    if clip01:
        adv = np.clip(adv, 0.0, 1.0)
    orig_pred = model.predict(x)
    y_true = orig_pred if y_true is None else _labels(y_true, x.shape[0])
    meta = {"method": "fgsm", "mode": "targeted", "epsilon": epsilon, "clip01": clip01}
    return _finish(model, x, adv, y_true, target, orig_pred, meta, segment_size)


def pgd(model, x, y_or_target, alpha=0.005, iterations=20, mode="untargeted", clip01=True,
        eps_ball=None, y_true=None, segment_size=256):
    """Iterated signed-gradient steps of size ``alpha``, clamped to [0, 1] after each.

    ``eps_ball`` optionally also projects onto an L-infinity ball around
    ``x``; by default only the data range constrains the iterates.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    if iterations < 1 or not alpha > 0:
        raise ConfigurationError("pgd needs alpha > 0 and iterations >= 1")
    targeted = mode == "targeted"
    x = _rows(x)
    labels = _labels(y_or_target, x.shape[0])
    adv = x.copy()
    for t in range(1, iterations + 1):
        grad = input_gradient(model, adv, labels)
        adv = _sign_step(adv, grad, alpha, targeted)
        if eps_ball is not None:
            adv = x + np.clip(adv - x, -eps_ball, eps_ball)
        if clip01:
            adv = np.clip(adv, 0.0, 1.0)
        if not np.all(np.isfinite(adv)):
            raise NumericError(f"pgd iteration {t}: non-finite iterate")
    orig_pred = model.predict(x)
    if targeted:
        y_true = orig_pred if y_true is None else _labels(y_true, x.shape[0])
        target = labels
    else:
        y_true, target = labels, None
    meta = {"method": "pgd", "mode": mode, "alpha": alpha, "iterations": iterations,
            "clip01": clip01, "eps_ball": eps_ball}
    return _finish(model, x, adv, y_true, target, orig_pred, meta, segment_size)


def run_attack(model, X, y, cfg, cost=None):
    """Attack the eligible rows of a test set.

    Untargeted: rows the model already classifies correctly. Targeted: rows
    whose true class differs from ``cfg.target``. Rows are attacked in the
    order given, in chunks of the model's batch size.
    """
    cost = cost or CostConfig()
    X = _rows(X)
    y = _labels(y, X.shape[0])
    if cfg.targeted:
        if cfg.target is None:
            raise ConfigurationError("targeted attacks need cfg.target (or use sweep_targets)")
        keep = y != cfg.target
    else:
        keep = model.predict(X) == y
    if not keep.any():
        raise EvaluationError(f"no eligible rows for {cfg.label()}")
    Xe, ye = X[keep], y[keep]
    S = cost.segment_size
    if cfg.method == "fgsm":
        if cfg.targeted:
            return fgsm_targeted(model, Xe, cfg.target, cfg.epsilon, cfg.clip01, y_true=ye, segment_size=S)
        return fgsm_untargeted(model, Xe, ye, cfg.epsilon, cfg.clip01, segment_size=S)
    labels = np.full(ye.size, cfg.target) if cfg.targeted else ye
    return pgd(model, Xe, labels, cfg.alpha, cfg.iterations, cfg.mode, cfg.clip01,
               eps_ball=cfg.eps_ball, y_true=ye, segment_size=S)


def sweep_targets(model, X, y, cfg, targets=None, cost=None):
    """Targeted attack toward each class in ``targets`` (default: all ten).

    Each target is attacked on the rows of every other class, so every row
    meets its nine wrong classes. Returns ``{target: AdvBatch}``.
    """
    if not cfg.targeted:
        raise ConfigurationError("sweep_targets needs a targeted AttackConfig")
    targets = range(N_CLASSES) if targets is None else targets
    out = {}
    for t in targets:
        c = AttackConfig(cfg.method, cfg.mode, cfg.epsilon, cfg.alpha, cfg.iterations, cfg.clip01, int(t), cfg.eps_ball)
        out[int(t)] = run_attack(model, X, y, c, cost)
    return out
