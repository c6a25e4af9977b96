"""Vibration signals: synthesis, file ingestion, windowing, normalization, splits."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .errors import ConfigurationError, LengthError, ParseError, ShapeError

WINDOW_LENGTH = 2048
SAMPLE_RATE = 12000
DEFAULT_RATIOS = (0.6, 0.2, 0.2)
SPLITS = ("train", "val", "test")


class FaultClass(enum.IntEnum):
    Normal = 0
    IR007 = 1
    IR014 = 2
    IR021 = 3
    B007 = 4
    B014 = 5
    B021 = 6
    OR007 = 7
    OR014 = 8
    OR021 = 9

    @property
    def location(self):
        """'IR', 'B', 'OR' or None for the healthy class."""
        return None if self is FaultClass.Normal else self.name.rstrip("0123456789")

    @property
    def diameter(self):
        """Fault diameter in inches (0.0 for Normal)."""
        return 0.0 if self is FaultClass.Normal else int(self.name[-3:]) / 1000.0


N_CLASSES = len(FaultClass)


@dataclass(frozen=True)
class RawRecording:
    samples: np.ndarray
    label: FaultClass
    sample_rate: float = SAMPLE_RATE
    source: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if samples.size < WINDOW_LENGTH:
            raise LengthError(f"recording has {samples.size} samples, need at least {WINDOW_LENGTH}")
        if not np.all(np.isfinite(samples)):
            raise ShapeError("recording contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "label", FaultClass(self.label))

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class SignalWindow:
    samples: np.ndarray
    label: FaultClass

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.shape != (WINDOW_LENGTH,):
            raise ShapeError(f"a window holds exactly {WINDOW_LENGTH} samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)) or samples.min() < 0.0 or samples.max() > 1.0:
            raise ShapeError("window samples must be finite and lie in [0, 1]")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "label", FaultClass(self.label))


def segment(rec, stride=WINDOW_LENGTH):
    """Cut ``rec`` into raw windows of 2048 samples starting every ``stride`` samples.

    Returns an array of shape (n_windows, 2048); every window carries
    ``rec.label``.
    """
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    x = np.asarray(rec.samples, dtype=np.float64)
    if x.size < WINDOW_LENGTH:
        raise LengthError(f"recording has {x.size} samples, need at least {WINDOW_LENGTH}")
    n = (x.size - WINDOW_LENGTH) // stride + 1
    starts = np.arange(n) * stride
    return x[starts[:, None] + np.arange(WINDOW_LENGTH)]


def minmax_normalize(raw):
    """Map each window (last axis) affinely onto [0, 1].

    A constant window has no range to stretch; it is mapped to 0.5 everywhere.
    """
    x = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ShapeError("cannot normalize non-finite samples")
    lo = x.min(axis=-1, keepdims=True)
    span = x.max(axis=-1, keepdims=True) - lo
    flat = span == 0
    out = (x - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


class MinMaxWindowScaler(TransformerMixin, BaseEstimator):
    """Stateless per-window min-max scaler; rows are windows."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        return minmax_normalize(X)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


# Bearing geometry of the CWRU 6205 drive-end bearing, as multiples of shaft speed.
_SHAFT_HZ = 29.95
_FAULT_ORDER = {"IR": 5.4152, "B": 4.7135, "OR": 3.5848}
_RESONANCE_HZ = {"IR": 3100.0, "B": 2300.0, "OR": 3700.0}
_DECAY_S = {"IR": 0.0010, "B": 0.0013, "OR": 0.0011}
_AMPLITUDE = {0.007: 1.5, 0.014: 2.5, 0.021: 3.5}
_DECAY_GROWTH = {0.007: 1.0, 0.014: 1.75, 0.021: 2.5}
_NOISE_STD = 0.25


def synth_bearing(fault, length=WINDOW_LENGTH * 8, seed=0, sample_rate=SAMPLE_RATE):
    """Synthesize a drive-end style acceleration record for ``fault``.

    Every class shares band-limited background noise plus a weak shaft
    harmonic. Faulty classes add an impulse train at the location's
    characteristic frequency (with slip jitter), rung through a decaying
    resonance; impulse amplitude and ringing time grow with fault diameter. Inner-race and
    ball impulses are amplitude-modulated by shaft and cage rotation.
    """
    fault = FaultClass(fault)
    if length < WINDOW_LENGTH:
        raise LengthError(f"length must be >= {WINDOW_LENGTH}, got {length}")
    rng = np.random.default_rng([int(seed), int(fault)])
    fs = float(sample_rate)
    t = np.arange(length) / fs

    sos = sps.butter(4, [200.0, 5000.0], btype="bandpass", fs=fs, output="sos")
    noise = sps.sosfilt(sos, rng.standard_normal(length + 512))[512:]
    noise *= _NOISE_STD / noise.std()
    phase = rng.uniform(0, 2 * np.pi)
    x = noise + 0.1 * np.sin(2 * np.pi * _SHAFT_HZ * t + phase)
    if fault is FaultClass.Normal:
        return RawRecording(x, fault, sample_rate, f"synth:{fault.name}:seed={seed}")

    loc = fault.location
    period = fs / (_FAULT_ORDER[loc] * _SHAFT_HZ)
    n_imp = int(length / period) + 2
    gaps = period * (1.0 + 0.01 * rng.standard_normal(n_imp))
    times = rng.uniform(0, period) + np.cumsum(gaps) - gaps[0]
    times = times[times < length - 1]
    amp = _AMPLITUDE[fault.diameter] * rng.lognormal(0.0, 0.08, times.size)
    if loc == "IR":
        amp *= 1.0 + 0.4 * np.cos(2 * np.pi * _SHAFT_HZ * times / fs + phase)
    elif loc == "B":
        amp *= 1.0 + 0.3 * np.cos(2 * np.pi * 0.3983 * _SHAFT_HZ * times / fs + phase)
    train = np.zeros(length)
    np.add.at(train, np.round(times).astype(int), amp)

    w = 2 * np.pi * _RESONANCE_HZ[loc] / fs
    r = math.exp(-1.0 / (_DECAY_S[loc] * _DECAY_GROWTH[fault.diameter] * fs))
    ringing = sps.lfilter([0.0, r * math.sin(w)], [1.0, -2 * r * math.cos(w), r * r], train)
    return RawRecording(x + ringing, fault, sample_rate, f"synth:{fault.name}:seed={seed}")


def impulse_amplitude(fault):
    """Nominal impulse amplitude used by the generator (0 for Normal)."""
    fault = FaultClass(fault)
    return 0.0 if fault is FaultClass.Normal else _AMPLITUDE[fault.diameter]


def load_recordings(path, format="csv", label=FaultClass.Normal, sample_rate=SAMPLE_RATE):
    """Read a single-channel recording from CSV (one value per line) or raw little-endian f64."""
    path = Path(path)
    if format == "csv":
        values = []
        with path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.strip()
                if not text:
                    continue
                try:
                    v = float(text)
                except ValueError:
                    raise ParseError(f"cannot parse {text!r} as a number", line=lineno) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {text!r}", line=lineno)
                values.append(v)
        samples = np.array(values, dtype=np.float64)
    elif format == "raw-f64le":
        data = path.read_bytes()
        if len(data) % 8:
            raise ParseError(f"{path}: size {len(data)} is not a multiple of 8 bytes")
        samples = np.frombuffer(data, dtype="<f8").astype(np.float64)
    else:
        raise ConfigurationError(f"unknown recording format {format!r}")
    if samples.size == 0:
        raise LengthError(f"{path}: no samples")
    return RawRecording(samples, label, sample_rate, f"file:{path.name}")


def write_recording(rec, path, format="csv"):
    path = Path(path)
    if format == "csv":
        path.write_text("".join(f"{v!r}\n" for v in rec.samples.tolist()))
    elif format == "raw-f64le":
        path.write_bytes(np.asarray(rec.samples, dtype="<f8").tobytes())
    else:
        raise ConfigurationError(f"unknown recording format {format!r}")
    return path


@dataclass
class Dataset:
    """Stratified train/val/test windows stored as (n, 2048) arrays."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    seed: int = 0
    ratios: tuple = DEFAULT_RATIOS
    sources: list = field(default_factory=list)

    def arrays(self, split):
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return getattr(self, f"X_{split}"), getattr(self, f"y_{split}")

    def windows(self, split):
        X, y = self.arrays(split)
        return [SignalWindow(row, label) for row, label in zip(X, y)]

    @property
    def train(self):
        return self.windows("train")

    @property
    def val(self):
        return self.windows("val")

    @property
    def test(self):
        return self.windows("test")

    @property
    def class_counts(self):
        counts = {}
        for split in SPLITS:
            y = self.arrays(split)[1]
            counts[split] = {c.name: int((y == c).sum()) for c in FaultClass}
        return counts

    def digest(self):
        h = hashlib.sha256()
        for split in SPLITS:
            X, y = self.arrays(split)
            h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
        return h.hexdigest()

    def manifest(self):
        return {
            "seed": int(self.seed),
            "ratios": list(self.ratios),
            "window_length": WINDOW_LENGTH,
            "class_counts": self.class_counts,
            "sources": list(self.sources),
            "sha256": self.digest(),
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for split in SPLITS:
            X, y = self.arrays(split)
            (directory / f"{split}.f64").write_bytes(np.ascontiguousarray(X, dtype="<f8").tobytes())
            files[split] = {"samples": f"{split}.f64", "labels": [int(v) for v in y]}
        manifest = self.manifest()
        manifest["files"] = files
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return directory / "manifest.json"

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = {}
        for split in SPLITS:
            entry = manifest["files"][split]
            X = np.frombuffer((directory / entry["samples"]).read_bytes(), dtype="<f8")
            arrays[f"X_{split}"] = X.reshape(-1, WINDOW_LENGTH).astype(np.float64)
            arrays[f"y_{split}"] = np.array(entry["labels"], dtype=np.int64)
        return cls(seed=manifest["seed"], ratios=tuple(manifest["ratios"]),
                   sources=manifest.get("sources", []), **arrays)


def split(windows, labels=None, ratios=DEFAULT_RATIOS, seed=0):
    """Stratified, seeded shuffle of windows into train/val/test.

    ``windows`` is either a list of :class:`SignalWindow` (``labels`` None)
    or an (n, 2048) array paired with ``labels``.
    """
    if labels is None:
        X = np.stack([w.samples for w in windows]) if len(windows) else np.empty((0, WINDOW_LENGTH))
        y = np.array([int(w.label) for w in windows], dtype=np.int64)
    else:
        X = np.asarray(windows, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != WINDOW_LENGTH or y.shape != (X.shape[0],):
        raise ShapeError(f"expected (n, {WINDOW_LENGTH}) windows with n labels, got {X.shape} / {y.shape}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = {s: [] for s in SPLITS}
    present = set(np.unique(y).tolist())
    for c in FaultClass:
        idx = np.flatnonzero(y == c)
        if idx.size == 0:
            if present:
                raise ConfigurationError(f"class {c.name} has no windows")
            continue
        if idx.size < 5:
            raise ConfigurationError(f"class {c.name} has {idx.size} windows, need at least 5")
        idx = rng.permutation(idx)
        n_train = round(idx.size * ratios[0])
        n_val = round(idx.size * ratios[1])
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    if not present:
        raise ConfigurationError("no windows to split")
    out = {}
    for s in SPLITS:
        idx = rng.permutation(np.concatenate(parts[s]))
        out[f"X_{s}"] = X[idx]
        out[f"y_{s}"] = y[idx]
    return Dataset(seed=seed, ratios=ratios, **out)


def make_dataset(windows_per_class=1000, seed=0, stride=WINDOW_LENGTH, ratios=DEFAULT_RATIOS):
    """Synthesize, window, normalize and split the 10-class bearing dataset."""
    length = WINDOW_LENGTH + (windows_per_class - 1) * stride
    X, y, sources = [], [], []
    for c in FaultClass:
        rec = synth_bearing(c, length=length, seed=seed)
        X.append(minmax_normalize(segment(rec, stride)))
        y.append(np.full(windows_per_class, int(c)))
        sources.append(rec.source)
    ds = split(np.concatenate(X), np.concatenate(y), ratios=ratios, seed=seed)
    ds.sources = sources
    return ds


def dataset_from_recordings(recordings, stride=WINDOW_LENGTH, ratios=DEFAULT_RATIOS, seed=0):
    X, y = [], []
    for rec in recordings:
        w = segment(rec, stride)
        X.append(minmax_normalize(w))
        y.append(np.full(len(w), int(rec.label)))
    ds = split(np.concatenate(X), np.concatenate(y), ratios=ratios, seed=seed)
    ds.sources = [rec.source for rec in recordings]
    return ds
