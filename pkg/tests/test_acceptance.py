"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary and
written to ``<cache>/acceptance.txt``). The trained zoo for seeds 0, 1, 2 is
cached under ``VIBATTACK_ACCEPTANCE_CACHE`` (default ``tests/.acceptance_cache``)
so that a rerun skips training; delete the directory for a cold run.

Cross-seed criteria are judged on the 3-seed mean of each quantity.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import central_diff, rel_error, smooth_coords
from vibattack import autodiff as ad
from vibattack.attacks import AttackConfig, fgsm_untargeted, pgd, run_attack, sweep_targets
from vibattack.cli import main as cli_main
from vibattack.defense import ablate_normalization, attach_defense
from vibattack.experiment import RunManifest
from vibattack.metrics import ConfusionMatrix, attack_cost, confusion, energy, success_rates
from vibattack.models import FaultClassifier, TrainConfig, accuracy, build, train
from vibattack.signal import make_dataset

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
EVAL_ROWS = 640
BASE = ("wdcnn", "lenet1d", "cnn1d", "alexnet1d")
ABLATED = ("wdcnn", "lenet1d", "cnn1d")
CACHE = Path(os.environ.get("VIBATTACK_ACCEPTANCE_CACHE", Path(__file__).parent / ".acceptance_cache"))
RESULTS = []

FGSM_U = AttackConfig("fgsm", "untargeted")
PGD_U = AttackConfig("pgd", "untargeted")
FGSM_T = AttackConfig("fgsm", "targeted")
PGD_T = AttackConfig("pgd", "targeted")


def verdict(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS.append(line)
    CACHE.mkdir(parents=True, exist_ok=True)
    with open(CACHE / "acceptance.txt", "a") as fh:
        fh.write(line + "\n")
    print(line)
    assert ok, line


def _specs():
    specs = {name: build(name) for name in BASE}
    specs["alexnet1d+dn"] = attach_defense(build("alexnet1d"))
    for name in ABLATED:
        specs[f"{name}-nonorm"] = ablate_normalization(build(name))
    return specs


def _attack(model, X, y, cfg):
    batches = list(sweep_targets(model, X, y, cfg).values()) if cfg.targeted else [run_attack(model, X, y, cfg)]
    r = success_rates(batches)
    out = {"mean": r.mean, "best": r.best, "cost": r.mean_cost}
    if cfg.method == "pgd" and not cfg.targeted:
        out["confusion"] = confusion(batches[0].labels, batches[0].adv_pred).counts.tolist()
    return out


def _seed_results(seed):
    """Train (or load) the zoo for ``seed`` and attack a 640-row test subset."""
    path = CACHE / f"seed{seed}.json"
    if path.exists():
        return json.loads(path.read_text())
    CACHE.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(1000, seed=seed)
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds.y_test))[:EVAL_ROWS])
    X, y = ds.X_test[idx], ds.y_test[idx]
    res = {"accuracy": {}, "train_seconds": {}, "epochs": {}, "attacks": {}}
    for name, spec in _specs().items():
        ckpt = CACHE / f"{name}_s{seed}.ckpt"
        if ckpt.exists():
            model = FaultClassifier.load(ckpt)
            seconds = model.metadata_["train_seconds"]
        else:
            t0 = time.perf_counter()
            model = train(spec, ds, TrainConfig(seed=seed))
            seconds = time.perf_counter() - t0
            model.save(ckpt, metadata={"train_seconds": seconds})
        res["accuracy"][name] = accuracy(model, ds.X_test, ds.y_test)
        res["train_seconds"][name] = seconds
        res["epochs"][name] = len(model.history_)
        configs = (FGSM_U, PGD_U, FGSM_T, PGD_T) if name in BASE else (PGD_T,)
        res["attacks"][name] = {cfg.label(): _attack(model, X, y, cfg) for cfg in configs}
    path.write_text(json.dumps(res, indent=1))
    return res


@pytest.fixture(scope="module")
def zoo():
    return {seed: _seed_results(seed) for seed in SEEDS}


def _mean(zoo, name, label):
    return float(np.mean([zoo[s]["attacks"][name][label]["mean"] for s in SEEDS]))


def _per_seed(zoo, name, label):
    return "/".join(f"{zoo[s]['attacks'][name][label]['mean']:.1f}" for s in SEEDS)


# -- 1 ----------------------------------------------------------------------

def _layer_cases(rng):
    bn_g, bn_b = rng.standard_normal((1, 4, 1)), rng.standard_normal((1, 4, 1))
    x3 = rng.standard_normal((3, 4, 40))
    labels = rng.integers(0, 10, 12)
    return {
        "conv": ([x3, rng.standard_normal((5, 4, 7)), rng.standard_normal(5)],
                 lambda t: ad.conv1d(t[0], t[1], t[2], stride=2, padding=3)),
        "bn": ([x3, bn_g, bn_b], lambda t: ad.batchnorm(t[0], t[1], t[2])),
        "dn": ([rng.uniform(size=(6, 1, 64)), np.full((1, 1, 1), 1.3), np.full((1, 1, 1), 0.2)],
               lambda t: ad.batchnorm(t[0], t[1], t[2], axes=(0,))),
        "relu": ([x3], lambda t: ad.relu(t[0])),
        "pool": ([x3], lambda t: ad.maxpool1d(t[0], 2)),
        "flatten": ([x3], lambda t: ad.flatten(t[0])),
        "dense": ([rng.standard_normal((6, 30)), rng.standard_normal((8, 30)), rng.standard_normal(8)],
                  lambda t: ad.dense(t[0], t[1], t[2])),
        "softmax-ce": ([rng.standard_normal((12, 10))],
                       lambda t: ad.scale(ad.softmax_cross_entropy(t[0], labels), 1.0)),
    }


def _layer_error(arrays, build_fn, rng, n=100):
    weights = rng.standard_normal(build_fn([ad.Tensor(a) for a in arrays]).shape)
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(ad.tsum(build_fn(tensors), weights))
    worst, probes = 0.0, 0
    for i, a in enumerate(arrays):
        def f(v, i=i):
            vals = list(arrays)
            vals[i] = v
            return float(np.sum(build_fn([ad.Tensor(u) for u in vals]).data * weights))

        coords, _ = smooth_coords(lambda v, i=i: f(v), a, min(n, a.size), rng)
        worst = max(worst, rel_error(tensors[i].grad.reshape(-1)[coords], central_diff(f, a, coords)).max())
        probes += len(coords)
    return worst, probes


def test_criterion_01_gradient_integrity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors, probes = {}, {}
    for kind, (arrays, fn) in _layer_cases(rng).items():
        errors[kind], probes[kind] = _layer_error(arrays, fn, rng)
    data = make_dataset(10, seed=11)
    for name in BASE:
        model = FaultClassifier(name, epochs=1, random_state=5).fit(data.X_train, data.y_train)
        X, y = data.X_test[:4], data.y_test[:4]
        _, g = model.loss_gradient(X, y)
        coords, _ = smooth_coords(lambda v: model.loss_gradient(v, y), X, 100, rng)
        num = central_diff(lambda v: model.loss_gradient(v, y)[0], X, coords)
        errors[name] = rel_error(g.reshape(-1)[coords], num).max()
        probes[name] = len(coords)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst < 1e-4 and min(probes.values()) >= 100 and elapsed < 120
    verdict(1, "gradient integrity", ok,
            f"max rel err {worst:.2e} over {len(errors)} checks (>= {min(probes.values())} coords each, "
            f"h=1e-4), {elapsed:.0f}s")


# -- 2 ----------------------------------------------------------------------

def test_criterion_02_baseline_fidelity(zoo):
    accs = {name: [zoo[s]["accuracy"][name] for s in SEEDS] for name in BASE}
    seconds = max(sum(zoo[s]["train_seconds"][n] for n in BASE) for s in SEEDS)
    worst = min(min(v) for v in accs.values())
    detail = ", ".join(f"{n} {min(v) * 100:.2f}%" for n, v in accs.items())
    verdict(2, "baseline fidelity", worst >= 0.99 and seconds < 900,
            f"worst-seed test accuracy {detail}; training {seconds / 60:.1f} min per seed")


# -- 3 ----------------------------------------------------------------------

def test_criterion_03_attack_potency(zoo):
    fgsm = {n: _mean(zoo, n, FGSM_U.label()) for n in BASE}
    pgd_ = {n: _mean(zoo, n, PGD_U.label()) for n in BASE}
    ok = (all(v >= 60 for v in fgsm.values())
          and all(pgd_[n] >= fgsm[n] - 2 for n in BASE)
          and sum(v >= 90 for v in pgd_.values()) >= 3)
    detail = "; ".join(f"{n} FGSM {fgsm[n]:.1f} PGD {pgd_[n]:.1f}" for n in BASE)
    verdict(3, "attack potency", ok, detail)


# -- 4 ----------------------------------------------------------------------

def test_criterion_04_targeted_not_above_untargeted(zoo):
    pairs = []
    for n in BASE:
        for method in ("fgsm", "pgd"):
            t = _mean(zoo, n, f"{method}-targeted")
            u = _mean(zoo, n, f"{method}-untargeted")
            pairs.append((n, method, t, u))
    ok = all(t <= u + 2 for *_, t, u in pairs)
    verdict(4, "targeted <= untargeted + 2", ok,
            "; ".join(f"{n} {m} {t:.1f}<={u:.1f}" for n, m, t, u in pairs))


# -- 5 ----------------------------------------------------------------------

def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.05, 1.0, 2048)
    c_same = attack_cost(x, x)
    c_tenth = attack_cost(x, x / 10)
    data = make_dataset(10, seed=6)
    model = FaultClassifier("cnn1d", epochs=1, random_state=0).fit(data.X_train, data.y_train)
    eps, S = 0.03, 256
    b = fgsm_untargeted(model, data.X_test, data.y_test, epsilon=eps, clip01=False)
    full = np.all(b.noise != 0, axis=1)
    seg_err = max(abs(e - S * eps * eps) for row in b.noise[full] for e in energy(row.reshape(-1, S)))
    homog = max(abs(energy(c * x) - c * c * energy(x)) / (c * c * energy(x)) for c in (0.1, 3.7, 250.0))
    ok = c_same == 0.0 and abs(c_tenth - 2) <= 1e-12 and full.any() and seg_err <= 1e-12 and homog <= 1e-12
    verdict(5, "metric oracles", ok,
            f"cost(x,x)={c_same}, |cost(x,x/10)-2|={abs(c_tenth - 2):.1e}, "
            f"segment energy err {seg_err:.1e} on {int(full.sum())} rows, homogeneity rel err {homog:.1e}")


# -- 6 ----------------------------------------------------------------------

def test_criterion_06_equivalence_collapse():
    data = make_dataset(250, seed=7)
    model = FaultClassifier("lenet1d", epochs=1, random_state=0).fit(data.X_train, data.y_train)
    X = np.concatenate([data.X_test, data.X_val])[:1000]
    y = np.concatenate([data.y_test, data.y_val])[:1000]
    eps = 0.03
    f = fgsm_untargeted(model, X, y, epsilon=eps, clip01=False)
    p = pgd(model, X, y, alpha=eps, iterations=1, clip01=False)
    same = f.adversarials.tobytes() == p.adversarials.tobytes()
    verdict(6, "PGD(T=1) == FGSM", same and len(X) >= 1000, f"{len(X)} rows, bit-identical={same}")


# -- 7 ----------------------------------------------------------------------

def test_criterion_07_defense_effect(zoo):
    base = _mean(zoo, "alexnet1d", PGD_T.label())
    defended = _mean(zoo, "alexnet1d+dn", PGD_T.label())
    acc = min(zoo[s]["accuracy"]["alexnet1d+dn"] for s in SEEDS)
    ok = defended <= base - 20 and acc >= 0.99
    verdict(7, "DN defense effect", ok,
            f"targeted PGD alexnet1d {base:.1f} ({_per_seed(zoo, 'alexnet1d', PGD_T.label())}) vs "
            f"alexnet1d+dn {defended:.1f} ({_per_seed(zoo, 'alexnet1d+dn', PGD_T.label())}), "
            f"drop {base - defended:.1f} (need >= 20); defended worst accuracy {acc * 100:.2f}%")


# -- 8 ----------------------------------------------------------------------

def test_criterion_08_ablation_direction(zoo):
    rows = []
    for n in ABLATED:
        orig, abl = _mean(zoo, n, PGD_T.label()), _mean(zoo, f"{n}-nonorm", PGD_T.label())
        rows.append((n, orig, abl))
    ok = all(a >= o - 2 for _, o, a in rows) and sum(a > o for _, o, a in rows) >= 2
    verdict(8, "ablation direction", ok,
            "; ".join(f"{n} {o:.2f} -> {a:.2f}" for n, o, a in rows) + " (targeted PGD; need >= -2 and 2 strict rises)")


# -- 9 ----------------------------------------------------------------------

def test_criterion_09_sink_concentration(zoo):
    counts = sum(np.array(zoo[s]["attacks"]["wdcnn"][PGD_U.label()]["confusion"]) for s in SEEDS)
    cm = ConfusionMatrix(counts)
    mass = cm.column_mass(off_diagonal=True)
    per_seed = "/".join(
        f"{ConfusionMatrix(np.array(zoo[s]['attacks']['wdcnn'][PGD_U.label()]['confusion'])).column_mass(True).max():.3f}"
        for s in SEEDS)
    verdict(9, "sink-class concentration", mass.max() > 0.2,
            f"wdcnn untargeted PGD max column mass {mass.max():.3f} (class {int(mass.argmax())}; per seed {per_seed}); "
            f"need > 0.200")


# -- 10 ---------------------------------------------------------------------

def test_criterion_10_reproducibility(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({
        "output_dir": str(tmp_path / "run"), "seed": 4, "models": ["cnn1d"],
        "data": {"windows_per_class": 30}, "train": {"epochs": 5}, "eval_rows": 128,
        "attacks": [{"method": "fgsm", "mode": "untargeted"}, {"method": "pgd", "mode": "targeted", "iterations": 3}],
        "defense": {"attach_to": ["cnn1d"], "ablate": ["cnn1d"]},
    }))
    stages = ("synth", "train", "attack", "defend", "report")
    for stage in stages:
        assert cli_main([stage, "--config", str(cfg)]) == 0
    recorded = {s: RunManifest.load(tmp_path / "run" / f"{s}.manifest.json").files for s in stages}
    codes = {s: cli_main([s, "--config", str(tmp_path / "run" / f"{s}.manifest.json"), "--verify"]) for s in stages}
    n_files = sum(len(v) for v in recorded.values())
    ok = all(c == 0 for c in codes.values()) and n_files > 0
    verdict(10, "reproducibility", ok, f"{n_files} files over {len(stages)} stages re-run from manifests; exit codes {codes}")
