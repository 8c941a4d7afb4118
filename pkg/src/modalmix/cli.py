"""Command-line entry point.

Subcommands: ``gen-data`` (write a benchmark directory), ``train`` (run the
two-stream loop into a run directory), ``eval`` (rank the gallery for a
trained run), ``gradcheck`` (finite-difference suite).  Exit codes:
0 success, 2 usage/validation problems, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as cfg
from . import data, evaluation, gradcheck, training
from .errors import (
    CheckpointError,
    ContractError,
    NumericsError,
    ParameterError,
    ShapeError,
    VocabularyError,
)

USAGE_ERRORS = (ParameterError, ShapeError, VocabularyError, CheckpointError, ContractError, OSError)


def _parse_schema(text):
    sizes = {"shape": 8, "color": 8, "pattern": 4}
    if text:
        for chunk in text.split(","):
            if "=" not in chunk:
                raise ParameterError(f"schema chunks look like 'shape=8', got {chunk!r}")
            name, _, count = chunk.partition("=")
            name = name.strip()
            if name not in sizes:
                raise ParameterError(f"unknown schema attribute {name!r}")
            sizes[name] = int(count)
    return data.AttributeSchema.default(sizes["shape"], sizes["color"], sizes["pattern"])


def cmd_gen_data(args):
    schema = _parse_schema(args.schema)
    dataset = data.generate_dataset(
        args.out,
        schema=schema,
        n_triplets=args.n,
        text_dominant_fraction=args.text_dominant_frac,
        val_fraction=args.val_frac,
        seed=args.seed,
        noise_eta=args.noise,
    )
    print(
        f"wrote {args.out}: {len(dataset.catalog)} items, "
        f"{len(dataset.train)} train / {len(dataset.val)} val triplets"
    )
    return 0


def cmd_train(args):
    resolved = cfg.parse_config(args.config) if args.config else cfg.default_config()
    train_config = cfg.to_train_config(resolved)
    dataset = data.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    cfg.echo_config(resolved, args.out)
    try:
        _, records = training.train(dataset, train_config, args.out)
    except NumericsError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        if err.dump_path:
            print(f"offending batch dumped to {err.dump_path}", file=sys.stderr)
        return 3
    print(f"trained {train_config.epochs} epochs into {args.out} ({len(records)} metric records)")
    return 0


def _load_run(run_dir, dataset):
    resolved = cfg.parse_config(f"{run_dir}/config.kv")
    train_config = cfg.to_train_config(resolved)
    model = training.build_model(dataset, train_config)
    training.load_checkpoint(model, run_dir)
    return model, resolved


def cmd_eval(args):
    dataset = data.load_dataset(args.data)
    model, resolved = _load_run(args.checkpoint, dataset)
    report = evaluation.evaluate(model, dataset, integration=resolved["integration"])
    evaluation.write_report(report, args.out)
    evaluation.export_attention(model, dataset, dataset.val, f"{args.out}/attention.csv")
    print(
        f"R@1 {report['r_at_1']:.2f}  R@10 {report['r_at_10']:.2f}  "
        f"R@50 {report['r_at_50']:.2f}  (n={report['n_queries']})"
    )
    return 0


def cmd_gradcheck(args):
    passed, lines = gradcheck.run_suite(args.seed)
    for line in lines:
        print(line)
    if not passed:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    print(f"all {len(lines)} gradient checks passed (tolerance {gradcheck.TOLERANCE})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="modalmix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark directory")
    p.add_argument("--schema", default="", help="vocabulary sizes, e.g. shape=8,color=8,pattern=4")
    p.add_argument("--n", type=int, default=4096, help="number of triplets")
    p.add_argument("--text-dominant-frac", type=float, default=0.5)
    p.add_argument("--val-frac", type=float, default=0.25)
    p.add_argument("--noise", type=float, default=0.0, help="text label-noise probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train into a run directory")
    p.add_argument("--config", default=None, help="key = value config file (defaults if omitted)")
    p.add_argument("--data", required=True, help="benchmark directory from gen-data")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on the validation split")
    p.add_argument("--checkpoint", required=True, help="run directory holding params.* and config.kv")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 2
    try:
        return args.func(args)
    except NumericsError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
