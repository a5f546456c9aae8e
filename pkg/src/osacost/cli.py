"""Command-line entry point: ``osacost <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import ARMS, DEFAULT_CONFIG, MODELS, Experiment, PipelineError, load_config


def _common(p):
    p.add_argument("--config", type=Path, help="INI experiment file (see `osacost init-config`)")
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="osacost", description="Annual care-cost prediction experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a commented default config file")
    p.add_argument("path", type=Path)

    for name, text in [
        ("synth", "generate a synthetic cohort into OUT/data"),
        ("prepare", "split cohorts, build pairs and vocabularies"),
        ("train-m1", "train and evaluate the next-visit model"),
        ("report", "assemble the metrics grid and cost summary"),
    ]:
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("augment", help="build an augmented training set")
    _common(p)
    p.add_argument("--arm", choices=("m1", "random"), default="m1")

    for name, text in [("train-m2", "train and evaluate a cost model"),
                       ("evaluate", "re-evaluate a trained cost model")]:
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--model", choices=MODELS, default="transformer")
        p.add_argument("--arm", choices=ARMS, default="original")

    p = sub.add_parser("run", help="run every stage end to end")
    _common(p)
    p.add_argument("--model", action="append", choices=MODELS, help="restrict to these models (repeatable)")
    p.add_argument("--arm", action="append", choices=ARMS, help="restrict to these arms (repeatable)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "init-config":
        args.path.write_text(DEFAULT_CONFIG)
        return 0
    try:
        exp = Experiment(load_config(args.config, args.seed), args.out)
        cmd = args.command
        if cmd == "synth":
            result = [str(p) for p in exp.synth()]
        elif cmd == "prepare":
            result = [str(p) for p in exp.prepare()]
        elif cmd == "train-m1":
            result = exp.train_m1()
        elif cmd == "augment":
            result = exp.augment(args.arm).to_dict()
        elif cmd == "train-m2":
            result = exp.train_m2(args.model, args.arm)["test"]
        elif cmd == "evaluate":
            result = exp.evaluate(args.model, args.arm)["test"]
        elif cmd == "report":
            exp.report()
            sys.stdout.write((exp.out / "report.txt").read_text())
            return 0
        else:
            exp.run(args.arm, args.model)
            sys.stdout.write((exp.out / "report.txt").read_text())
            return 0
    except (PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"osacost: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
