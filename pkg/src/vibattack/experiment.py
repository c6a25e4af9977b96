"""Experiment configuration, run manifests and the pipeline stages.

Output layout under ``output_dir``::

    data/                 dataset arrays + manifest.json          (synth)
    models/               <name>.ckpt, accuracy.csv                (train, defend)
    attacks/              reports.csv, reports.json, adv/*         (attack)
    defense/              reports.csv, comparison.csv, reports.json (defend)
    report.json                                                    (report)
    <stage>.manifest.json

Every stage writes a :class:`RunManifest` holding the resolved config, the
sha256 of each input and output file and per-step wall times. Output files
carry no timestamps, so re-running a stage from its manifest reproduces them
byte for byte.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, run_attack, sweep_targets
from .defense import ablate_normalization, attach_defense
from .errors import ConfigurationError, StateError
from .metrics import CostConfig, confusion, success_rates, write_reports_csv, write_reports_json
from .models import REGISTRY, FaultClassifier, TrainConfig, build, train
from .signal import FaultClass, Dataset, dataset_from_recordings, load_recordings, make_dataset

log = logging.getLogger(__name__)

STAGES = ("synth", "train", "attack", "defend", "report")
DEFAULT_MODELS = ("wdcnn", "lenet1d", "cnn1d", "alexnet1d")
DEFAULT_ATTACKS = (
    {"method": "fgsm", "mode": "untargeted"},
    {"method": "pgd", "mode": "untargeted"},
    {"method": "fgsm", "mode": "targeted"},
    {"method": "pgd", "mode": "targeted"},
)
EXPORTS = ("none", "untargeted", "all")


def stage_seed(root, stage):
    """Independent 32-bit seed for ``stage`` derived from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class DataConfig:
    source: str = "synth"
    seed: int | None = None
    windows_per_class: int = 1000
    stride: int = 2048
    recordings: list = field(default_factory=list)


@dataclass
class DefenseConfig:
    attach_to: list = field(default_factory=lambda: ["alexnet1d"])
    ablate: list = field(default_factory=lambda: ["wdcnn", "lenet1d", "cnn1d"])
    dn_modes: list = field(default_factory=lambda: ["batch", "running"])
    retrain: bool = True


@dataclass
class ExperimentConfig:
    """Resolved settings for every stage.

    ``eval_rows`` caps how many test windows the attack stages use (a seeded
    subset; ``None`` means the whole test split). ``export`` selects which
    adversarial batches are dumped as raw tensors.
    """

    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    models: list = field(default_factory=lambda: list(DEFAULT_MODELS))
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: list = field(default_factory=lambda: [AttackConfig(**a) for a in DEFAULT_ATTACKS])
    cost: CostConfig = field(default_factory=CostConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    eval_rows: int | None = 640
    eval_seed: int | None = None
    export: str = "untargeted"

    def __post_init__(self):
        if self.data.seed is None:
            self.data.seed = stage_seed(self.seed, "data")
        if self.eval_seed is None:
            self.eval_seed = stage_seed(self.seed, "eval")
        if self.data.source not in ("synth", "csv", "raw"):
            raise ConfigurationError(f"data.source must be synth, csv or raw, got {self.data.source!r}")
        if self.data.source != "synth" and not self.data.recordings:
            raise ConfigurationError(f"data.source={self.data.source!r} needs data.recordings entries")
        for name in list(self.models) + list(self.defense.attach_to) + list(self.defense.ablate):
            if name not in REGISTRY:
                raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(REGISTRY)}")
        if not set(self.defense.dn_modes) <= {"batch", "running"}:
            raise ConfigurationError(f"defense.dn_modes must be drawn from batch/running, got {self.defense.dn_modes}")
        if self.export not in EXPORTS:
            raise ConfigurationError(f"export must be one of {EXPORTS}, got {self.export!r}")
        if self.eval_rows is not None and self.eval_rows < 1:
            raise ConfigurationError("eval_rows must be positive (or null for the whole test split)")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        seed = int(doc.get("seed", 0))
        train_doc = dict(doc.get("train", {}))
        train_doc.setdefault("seed", stage_seed(seed, "train"))
        try:
            return cls(
                seed=seed,
                output_dir=str(doc.get("output_dir", "runs/default")),
                data=DataConfig(**doc.get("data", {})),
                models=list(doc.get("models", DEFAULT_MODELS)),
                train=TrainConfig(**train_doc),
                attacks=[AttackConfig(**a) for a in doc.get("attacks", DEFAULT_ATTACKS)],
                cost=CostConfig(**doc.get("cost", {})),
                defense=DefenseConfig(**doc.get("defense", {})),
                eval_rows=doc.get("eval_rows", 640),
                eval_seed=doc.get("eval_seed"),
                export=doc.get("export", "untargeted"),
            )
        except TypeError as exc:
            raise ConfigurationError(f"bad config: {exc}") from None

    def to_dict(self):
        return asdict(self)

    @property
    def out(self):
        return Path(self.output_dir)


def resolve_config(file_doc=None, overrides=None):
    """Apply precedence flags > config file > defaults and resolve derived seeds.

    A ``seed`` override discards stage seeds pinned by the file, so they are
    re-derived from the new root.
    """
    doc = dict(file_doc or {})
    overrides = dict(overrides or {})
    if "seed" in overrides:
        doc.pop("eval_seed", None)
        for key in ("data", "train"):
            if isinstance(doc.get(key), dict):
                doc[key] = {k: v for k, v in doc[key].items() if k != "seed"}
    return ExperimentConfig.from_dict(_merge(doc, overrides))


def load_config_file(path):
    """Read a JSON config, or the config snapshot of a RunManifest."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and doc.get("kind") == "run-manifest":
        return doc["config"], doc
    return doc, None


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    stage: str
    config: dict
    version: str = __version__
    wall_time: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def record(self, root, paths, into="files"):
        root = Path(root)
        target = getattr(self, into)
        for p in paths:
            p = Path(p)
            target[str(p.relative_to(root))] = sha256_file(p)

    def path(self, root):
        return Path(root) / f"{self.stage}.manifest.json"

    def save(self, root):
        doc = {"kind": "run-manifest", **asdict(self)}
        p = self.path(root)
        p.write_text(json.dumps(doc, indent=1, sort_keys=True))
        return p

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        doc.pop("kind", None)
        return cls(**doc)

    def verify(self, root):
        """Names of recorded output files whose current hash differs (or that are missing)."""
        root = Path(root)
        bad = []
        for rel, digest in sorted(self.files.items()):
            p = root / rel
            if not p.exists() or sha256_file(p) != digest:
                bad.append(rel)
        return bad


class _Timer:
    def __init__(self, manifest, key):
        self.manifest, self.key = manifest, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.wall_time[self.key] = round(time.perf_counter() - self.t0, 3)


# -- stages -----------------------------------------------------------------

def _data_dir(cfg):
    return cfg.out / "data"


def _model_path(cfg, name):
    return cfg.out / "models" / f"{name}.ckpt"


def load_dataset(cfg):
    d = _data_dir(cfg)
    if not (d / "manifest.json").exists():
        raise StateError(f"no dataset under {d}; run `vibattack synth` with the same --out first")
    return Dataset.load(d)


def load_model(cfg, name):
    p = _model_path(cfg, name)
    if not p.exists():
        raise StateError(f"model {name!r} is not trained (no {p}); run `vibattack train` first")
    return _load(p)


def _load(path):
    model = FaultClassifier.load(path)
    model.metrics_ = model.metadata_.get("metrics", {})
    return model


def cmd_synth(cfg):
    m = RunManifest("synth", cfg.to_dict())
    with _Timer(m, "synth"):
        if cfg.data.source == "synth":
            ds = make_dataset(cfg.data.windows_per_class, seed=cfg.data.seed, stride=cfg.data.stride)
        else:
            fmt = "csv" if cfg.data.source == "csv" else "raw-f64le"
            recs = []
            for entry in cfg.data.recordings:
                label = entry["label"]
                label = FaultClass[label] if isinstance(label, str) else FaultClass(int(label))
                recs.append(load_recordings(entry["path"], entry.get("format", fmt), label))
            ds = dataset_from_recordings(recs, stride=cfg.data.stride, seed=cfg.data.seed)
        d = _data_dir(cfg)
        ds.save(d)
    m.record(cfg.out, sorted(d.iterdir()))
    m.save(cfg.out)
    log.info("dataset %s written to %s", ds.digest()[:12], d)
    return m


def _write_accuracy_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "train_acc", "val_acc", "test_acc", "epochs"])
        for name, model in rows:
            acc = model.metrics_
            w.writerow([name, repr(acc["train"]), repr(acc["val"]), repr(acc["test"]), len(model.history_)])


def _train_one(cfg, spec, ds, m):
    with _Timer(m, f"train:{spec.name}"):
        model = train(spec, ds, cfg.train)
    path = _model_path(cfg, spec.name)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path, metadata={"metrics": model.metrics_, "dataset": ds.digest()})
    m.checkpoints[spec.name] = model.checkpoint_hash()
    log.info("%s: test accuracy %.4f after %d epochs", spec.name, model.metrics_["test"], len(model.history_))
    return model, path


def cmd_train(cfg):
    ds = load_dataset(cfg)
    m = RunManifest("train", cfg.to_dict())
    m.record(cfg.out, [_data_dir(cfg) / "manifest.json"], into="inputs")
    trained, paths = [], []
    for name in cfg.models:
        model, path = _train_one(cfg, build(name), ds, m)
        trained.append((name, model))
        paths.append(path)
    acc = cfg.out / "models" / "accuracy.csv"
    _write_accuracy_csv(acc, trained)
    m.record(cfg.out, paths + [acc])
    m.save(cfg.out)
    return m


def eval_subset(cfg, ds):
    """The (seeded) test rows used by the attack stages."""
    X, y = ds.X_test, ds.y_test
    if cfg.eval_rows is None or cfg.eval_rows >= len(y):
        return X, y
    idx = np.sort(np.random.default_rng(cfg.eval_seed).permutation(len(y))[: cfg.eval_rows])
    return X[idx], y[idx]


def evaluate(model, name, X, y, attack, cfg):
    """Run one attack configuration and aggregate it.

    Returns ``(report, batches, confusion_or_None)``; targeted attacks sweep
    every class unless ``attack.target`` pins one.
    """
    if attack.targeted and attack.target is None:
        out = sweep_targets(model, X, y, attack, cost=cfg.cost)
        batches = list(out.values())
    else:
        out = None
        batches = [run_attack(model, X, y, attack, cfg.cost)]
    report = success_rates(batches, name, attack.method, attack.mode, seed=cfg.seed,
                           segment_size=cfg.cost.segment_size)
    if out is not None:
        report.per_target.update({str(t): success_rates([b]).mean for t, b in out.items()})
    cm = None
    if not attack.targeted:
        b = batches[0]
        cm = confusion(b.labels, b.adv_pred)
    return report, batches, cm


def _export(cfg, directory, name, attack, batches):
    if cfg.export == "none" or (cfg.export == "untargeted" and attack.targeted):
        return []
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for b in batches:
        stem = f"{name}.{attack.label()}"
        if b.target is not None:
            stem += f".t{int(b.target[0])}"
        p = b.save(directory / stem)
        written += [p] + [directory / f for f in json.loads(p.read_text())["files"].values()]
    return written


def _attack_matrix(cfg, models, X, y, m, adv_dir):
    reports, confusions, files = [], {}, []
    for name, model in models:
        for attack in cfg.attacks:
            key = f"{name}/{attack.label()}"
            with _Timer(m, f"attack:{key}"):
                report, batches, cm = evaluate(model, name, X, y, attack, cfg)
            reports.append(report)
            if cm is not None:
                confusions[key] = cm
            if adv_dir is not None:
                files += _export(cfg, adv_dir, name, attack, batches)
            log.info("%s: mean %.2f best %.2f cost %.3f", key, report.mean, report.best, report.mean_cost)
    return reports, confusions, files


def cmd_attack(cfg):
    ds = load_dataset(cfg)
    m = RunManifest("attack", cfg.to_dict())
    models = [(name, load_model(cfg, name)) for name in cfg.models]
    m.record(cfg.out, [_data_dir(cfg) / "manifest.json"] + [_model_path(cfg, n) for n in cfg.models], into="inputs")
    m.checkpoints = {name: model.checkpoint_hash() for name, model in models}
    X, y = eval_subset(cfg, ds)
    out = cfg.out / "attacks"
    out.mkdir(parents=True, exist_ok=True)
    reports, confusions, files = _attack_matrix(cfg, models, X, y, m, out / "adv")
    csv_path = write_reports_csv(reports, out / "reports.csv")
    json_path = write_reports_json(reports, out / "reports.json", confusions,
                                   {"eval_rows": int(len(y)), "eval_seed": cfg.eval_seed})
    m.record(cfg.out, [csv_path, json_path] + files)
    m.save(cfg.out)
    return m


def _variant_models(cfg, ds, m):
    """Trained (base, variant, kind) triples for the defense and ablation lists."""
    triples = []
    plan = [(n, attach_defense(build(n)), "defense") for n in cfg.defense.attach_to]
    plan += [(n, ablate_normalization(build(n)), "ablation") for n in cfg.defense.ablate]
    for base, spec, kind in plan:
        base_model = load_model(cfg, base)
        if cfg.defense.retrain:
            model, _ = _train_one(cfg, spec, ds, m)
        else:
            p = _model_path(cfg, spec.name)
            if not p.exists():
                raise StateError(f"{spec.name} has not been trained; enable defense.retrain or train it first")
            model = _load(p)
        triples.append((base, base_model, spec.name, model, kind))
    return triples


def cmd_defend(cfg):
    ds = load_dataset(cfg)
    m = RunManifest("defend", cfg.to_dict())
    m.record(cfg.out, [_data_dir(cfg) / "manifest.json"], into="inputs")
    triples = _variant_models(cfg, ds, m)
    X, y = eval_subset(cfg, ds)
    rows, reports, confusions = [], [], {}
    seen = {}
    for base, base_model, vname, vmodel, kind in triples:
        m.checkpoints.setdefault(base, base_model.checkpoint_hash())
        m.checkpoints[vname] = vmodel.checkpoint_hash()
        variants = [(vname, vmodel)]
        if kind == "defense" and "running" in cfg.defense.dn_modes:
            running = copy.copy(vmodel)
            running.dn_mode = "running"
            variants = ([(vname, vmodel)] if "batch" in cfg.defense.dn_modes else []) + [(f"{vname}[running]", running)]
        for attack in cfg.attacks:
            if (base, attack.label()) not in seen:
                with _Timer(m, f"defend:{base}/{attack.label()}"):
                    rep, _, cm = evaluate(base_model, base, X, y, attack, cfg)
                seen[(base, attack.label())] = rep
                reports.append(rep)
                if cm is not None:
                    confusions[f"{base}/{attack.label()}"] = cm
            base_rep = seen[(base, attack.label())]
            for label, model in variants:
                with _Timer(m, f"defend:{label}/{attack.label()}"):
                    rep, _, cm = evaluate(model, label, X, y, attack, cfg)
                reports.append(rep)
                if cm is not None:
                    confusions[f"{label}/{attack.label()}"] = cm
                rows.append([kind, base, label, attack.method, attack.mode,
                             repr(base_rep.mean), repr(rep.mean), repr(rep.mean - base_rep.mean)])
    out = cfg.out / "defense"
    out.mkdir(parents=True, exist_ok=True)
    comparison = out / "comparison.csv"
    with open(comparison, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Kind", "Base", "Variant", "Method", "Mode", "BaseMean", "VariantMean", "Delta"])
        w.writerows(rows)
    csv_path = write_reports_csv(reports, out / "reports.csv")
    json_path = write_reports_json(reports, out / "reports.json", confusions, {"eval_rows": int(len(y))})
    acc = out / "accuracy.csv"
    _write_accuracy_csv(acc, [(t[2], t[3]) for t in triples])
    m.record(cfg.out, [comparison, csv_path, json_path, acc]
             + [_model_path(cfg, t[2]) for t in triples])
    m.save(cfg.out)
    return m


def cmd_report(cfg):
    """Collect the CSV artifacts of earlier stages into ``report.json`` and ``report.txt``."""
    m = RunManifest("report", cfg.to_dict())
    doc, lines = {}, []
    sources = [("attack", cfg.out / "attacks" / "reports.csv"), ("defense", cfg.out / "defense" / "comparison.csv"),
               ("accuracy", cfg.out / "models" / "accuracy.csv")]
    for key, path in sources:
        if path.exists():
            with open(path, newline="") as fh:
                doc[key] = list(csv.DictReader(fh))
            m.record(cfg.out, [path], into="inputs")
    if not doc:
        raise StateError(f"nothing to report under {cfg.out}; run train/attack/defend first")
    for row in doc.get("accuracy", []):
        lines.append(f"{row['model']:<22} test accuracy {float(row['test_acc']) * 100:6.2f}%")
    if "attack" in doc:
        lines.append(f"{'model':<22} {'attack':<18} {'mean':>7} {'best':>7} {'cost':>6}")
        for r in doc["attack"]:
            lines.append(f"{r['Model']:<22} {r['Method'] + '-' + r['Mode']:<18} "
                         f"{float(r['Mean']):7.2f} {float(r['Best']):7.2f} {float(r['Cost']):6.3f}")
    for r in doc.get("defense", []):
        lines.append(f"{r['Kind']:<9} {r['Variant']:<22} {r['Method'] + '-' + r['Mode']:<18} "
                     f"{float(r['BaseMean']):7.2f} -> {float(r['VariantMean']):7.2f} ({float(r['Delta']):+.2f})")
    path = cfg.out / "report.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    text = cfg.out / "report.txt"
    text.write_text("\n".join(lines) + "\n")
    m.record(cfg.out, [path, text])
    m.save(cfg.out)
    return m


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "attack": cmd_attack, "defend": cmd_defend, "report": cmd_report}
