"""Command-line entry point: ``vibattack {synth,train,attack,defend,report}``.

Settings come from defaults, then ``--config`` (a JSON config or a stage's
RunManifest), then flags. Log verbosity is read from ``VIBATTACK_LOG``
(DEBUG, INFO, WARNING; default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .errors import VibAttackError
from .experiment import COMMANDS, RunManifest, load_config_file, resolve_config

LOG_ENV = "VIBATTACK_LOG"


def _names(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="vibattack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config or a <stage>.manifest.json to re-run")
    common.add_argument("--seed", type=int, metavar="N", help="root seed; stage seeds derive from it")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--models", type=_names, metavar="a,b", help="victim models")
    common.add_argument("--eps", type=float, metavar="F", help="FGSM step size")
    common.add_argument("--alpha", type=float, metavar="F", help="PGD step size")
    common.add_argument("--iters", type=int, metavar="N", help="PGD iterations")
    common.add_argument("--segment-size", type=int, metavar="N", help="attack-cost segment length S")
    common.add_argument("--no-clip", action="store_true", help="do not clamp adversarial samples to [0, 1]")
    common.add_argument("--windows-per-class", type=int, metavar="N", help="synthetic windows per class")
    common.add_argument("--epochs", type=int, metavar="N", help="maximum training epochs")
    common.add_argument("--rows", type=int, metavar="N", help="test rows used by attack stages")
    common.add_argument("--verify", action="store_true",
                        help="with a manifest as --config: fail unless every output is reproduced byte for byte")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("synth", "generate (or load) and split the dataset"),
        ("train", "train the victim models"),
        ("attack", "run the FGSM/PGD attack matrix"),
        ("defend", "retrain with DN / without normalization and compare"),
        ("report", "summarize earlier stages"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    return parser


def _overrides(args, file_doc):
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["output_dir"] = args.out
    if args.models is not None:
        o["models"] = args.models
    if args.segment_size is not None:
        o["cost"] = {"segment_size": args.segment_size}
    if args.windows_per_class is not None:
        o["data"] = {"windows_per_class": args.windows_per_class}
    if args.epochs is not None:
        o["train"] = {"epochs": args.epochs}
    if args.rows is not None:
        o["eval_rows"] = args.rows
    attack_flags = {"epsilon": args.eps, "alpha": args.alpha, "iterations": args.iters}
    attack_flags = {k: v for k, v in attack_flags.items() if v is not None}
    if args.no_clip:
        attack_flags["clip01"] = False
    if attack_flags:
        # flags apply to every configured attack; start from the file's list if any
        base = resolve_config(file_doc).to_dict()["attacks"]
        o["attacks"] = [{**a, **attack_flags} for a in base]
    return o


def main(argv=None):
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        file_doc, manifest = load_config_file(args.config) if args.config else ({}, None)
        if manifest is not None and manifest["stage"] != args.command:
            raise VibAttackError(f"{args.config} is a {manifest['stage']!r} manifest, not {args.command!r}")
        cfg = resolve_config(file_doc, _overrides(args, file_doc))
        result = COMMANDS[args.command](cfg)
    except (VibAttackError, OSError) as exc:
        print(f"vibattack {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(f"{args.command}: wrote {len(result.files)} file(s); manifest {result.path(cfg.out)}")
    if args.command == "report":
        print((cfg.out / "report.txt").read_text(), end="")
    if args.verify:
        if manifest is None:
            print("--verify needs a manifest passed as --config", file=sys.stderr)
            return 2
        expected = RunManifest(**{k: v for k, v in manifest.items() if k != "kind"})
        mismatched = [rel for rel, digest in sorted(expected.files.items()) if result.files.get(rel) != digest]
        if mismatched:
            print(f"not reproduced: {', '.join(mismatched)}", file=sys.stderr)
            return 1
        print(f"reproduced: {len(expected.files)}/{len(expected.files)} files identical")
    return 0


if __name__ == "__main__":
    sys.exit(main())
