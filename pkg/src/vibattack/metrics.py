"""Attack cost, success-rate aggregation and confusion matrices."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError, EvaluationError, ShapeError
from .signal import N_CLASSES

REPORT_BATCH = 64
CSV_COLUMNS = ("Model", "Method", "Mode", "Mean", "Best", "Cost", "S", "Seed")
COST_POLICY = "mean over rows with finite cost (zero-noise rows excluded)"


@dataclass(frozen=True)
class CostConfig:
    segment_size: int = 256

    def __post_init__(self):
        if self.segment_size < 1:
            raise ConfigurationError(f"segment_size must be positive, got {self.segment_size}")


def energy(x, axis=-1):
    """Sum of squared samples along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    return np.sum(x * x, axis=axis)


def _segments(x, size):
    x = np.asarray(x, dtype=np.float64)
    n_seg = x.shape[-1] // size
    if n_seg < 1:
        raise ShapeError(f"signal of length {x.shape[-1]} holds no full segment of size {size}")
    return x[..., : n_seg * size].reshape(*x.shape[:-1], n_seg, size)


def attack_costs(X, N, segment_size=256):
    """Row-wise attack cost: mean over segments of log10(signal energy / noise energy).

    Rows whose noise energy vanishes on any segment get ``+inf``.
    A trailing partial segment is ignored.
    """
    X = np.asarray(X, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    if X.shape != N.shape:
        raise ShapeError(f"signal {X.shape} and noise {N.shape} differ in shape")
    ex = energy(_segments(X, segment_size))
    en = energy(_segments(N, segment_size))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.log10(ex) - np.log10(en)
    cost = ratio.mean(axis=-1)
    return np.where((en == 0).any(axis=-1), np.inf, cost)


def attack_cost(x, n, cfg=None):
    """Attack cost of one perturbed signal; see :func:`attack_costs`."""
    size = (cfg or CostConfig()).segment_size if not isinstance(cfg, int) else cfg
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"attack_cost takes one signal, got shape {x.shape}")
    return float(attack_costs(x, n, size))


def cost_db(cost):
    return 10.0 * np.asarray(cost)


@dataclass
class SuccessReport:
    model: str
    method: str
    mode: str
    mean: float
    best: float
    mean_cost: float
    n_rows: int = 0
    segment_size: int = 256
    seed: int = 0
    cost_policy: str = COST_POLICY
    per_target: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.mean <= self.best <= 100.0:
            raise EvaluationError(f"inconsistent success rates mean={self.mean} best={self.best}")

    def to_row(self):
        return {
            "Model": self.model, "Method": self.method, "Mode": self.mode,
            "Mean": repr(float(self.mean)), "Best": repr(float(self.best)),
            "Cost": repr(float(self.mean_cost)), "S": str(self.segment_size), "Seed": str(self.seed),
        }

    @classmethod
    def from_row(cls, row):
        return cls(row["Model"], row["Method"], row["Mode"], float(row["Mean"]), float(row["Best"]),
                   float(row["Cost"]), segment_size=int(row["S"]), seed=int(row["Seed"]))

    def to_dict(self):
        return asdict(self)


def success_rates(batches, model="", method="", mode="", batch_size=REPORT_BATCH, seed=0, segment_size=256):
    """Aggregate one or more AdvBatch results into a :class:`SuccessReport`.

    ``mean`` pools all rows; ``best`` is the highest rate over consecutive
    ``batch_size``-row groups (a trailing partial group counts only when no
    full group exists), floored at ``mean`` so that ``best >= mean`` holds
    even when the partial tail outperforms every full group. Both are
    percentages.
    """
    if not isinstance(batches, (list, tuple)):
        batches = [batches]
    success = np.concatenate([np.asarray(b.success, dtype=bool) for b in batches]) if batches else np.array([], bool)
    cost = np.concatenate([np.asarray(b.cost, dtype=np.float64) for b in batches]) if batches else np.array([])
    if success.size == 0:
        raise EvaluationError("no eligible rows to score")
    mean = 100.0 * success.mean()
    n_full = success.size // batch_size
    if n_full:
        groups = success[: n_full * batch_size].reshape(n_full, batch_size).mean(axis=1)
    else:
        groups = np.array([success.mean()])
    best = max(100.0 * groups.max(), mean)
    finite = np.isfinite(cost)
    mean_cost = float(cost[finite].mean()) if finite.any() else math.inf
    return SuccessReport(model, method, mode, float(mean), float(best), mean_cost,
                         n_rows=int(success.size), segment_size=segment_size, seed=seed)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def column_mass(self, off_diagonal=False):
        """Share of predictions landing in each column."""
        c = self.counts.astype(np.float64)
        if off_diagonal:
            c = c - np.diag(np.diag(c))
        total = c.sum()
        return c.sum(axis=0) / total if total else np.zeros(c.shape[1])

    def sink_ratio(self, off_diagonal=False):
        """Largest column mass divided by the uniform share 1/n_classes."""
        return float(self.column_mass(off_diagonal).max() * self.counts.shape[1])

    def to_dict(self):
        return {
            "counts": self.counts.tolist(),
            "column_mass": self.column_mass().tolist(),
            "sink_ratio": self.sink_ratio(),
        }


def confusion(true_labels, preds, n_classes=N_CLASSES):
    t = np.asarray(true_labels)
    p = np.asarray(preds)
    if t.shape != p.shape or t.ndim != 1:
        raise ShapeError(f"label sequences differ in shape: {t.shape} vs {p.shape}")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DomainError(f"labels must lie in [0, {n_classes - 1}]")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t.astype(int), p.astype(int)), 1)
    return ConfusionMatrix(counts)


def write_reports_csv(reports, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.to_row())
    return path


def read_reports_csv(path):
    with Path(path).open(newline="") as fh:
        return [SuccessReport.from_row(row) for row in csv.DictReader(fh)]


def write_reports_json(reports, path, confusions=None, extra=None):
    doc = {"reports": [r.to_dict() for r in reports], "cost_policy": COST_POLICY}
    if confusions:
        doc["confusion"] = {k: v.to_dict() for k, v in confusions.items()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, default=float))
    return Path(path)
