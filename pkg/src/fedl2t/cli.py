"""Command-line front end.

Subcommands: run (comparison, optionally halting at a checkpoint round),
sweep (lambda_c / label_ratio / mu), export-data (write the synthetic
dataset as a columnar text file), resume (finish a halted comparison).
Exit code is 0 on success and nonzero with a diagnostic on any error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .data import generate, save_dataset
from .errors import FedL2TError
from .harness import (
    ExperimentConfig,
    default_config,
    export_results,
    export_sweep,
    load_config,
    resume_comparison,
    run_comparison,
    run_comparison_halting,
    run_sweep,
)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="config file (INI); omit for desk-scale defaults")
    parser.add_argument("--seed", help="comma-separated seed list overriding the config")
    parser.add_argument("--algo", help="comma-separated algorithm list overriding the config")
    parser.add_argument("--out", help="output directory overriding the config")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")


def _effective_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    if args.seed:
        config = replace(config, seeds=[int(s) for s in args.seed.replace(",", " ").split()])
    if args.algo:
        config = replace(config, algorithms=[a for a in args.algo.split(",") if a.strip()])
    if args.out:
        config = replace(config, output_dir=args.out)
    return config


def _progress(args):
    if args.quiet:
        return None
    return lambda msg: print(msg, flush=True)


def _cmd_run(args) -> int:
    config = _effective_config(args)
    if args.checkpoint_round is not None:
        run_comparison_halting(config, args.checkpoint_round, progress=_progress(args))
        if not args.quiet:
            print(
                f"halted at round {args.checkpoint_round}; checkpoints in "
                f"{config.output_dir} (finish with: fedl2t resume)"
            )
        return 0
    result = run_comparison(config, progress=_progress(args))
    export_results(result, config.output_dir)
    if not args.quiet:
        for algo, mean, std in result.summary():
            print(f"{algo}: final accuracy {mean:.4f} +/- {std:.4f}")
        print(f"results written to {config.output_dir}")
    return 0


def _cmd_sweep(args) -> int:
    config = _effective_config(args)
    values = [float(v) for v in args.values.replace(",", " ").split()]
    sweep = run_sweep(config, args.param, values, progress=_progress(args))
    export_sweep(sweep, args.param, config.output_dir)
    if not args.quiet:
        for value, result in sweep.items():
            for algo, mean, std in result.summary():
                print(f"{args.param}={value!r} {algo}: {mean:.4f} +/- {std:.4f}")
        print(f"sweep results written to {config.output_dir}")
    return 0


def _cmd_export_data(args) -> int:
    config = _effective_config(args)
    seed = config.seeds[0] if not args.seed else int(args.seed.replace(",", " ").split()[0])
    datasets = generate(replace(config.data, seed=seed))
    save_dataset(datasets, args.file)
    if not args.quiet:
        print(f"dataset (seed {seed}) written to {args.file}")
    return 0


def _cmd_resume(args) -> int:
    config = _effective_config(args)
    result = resume_comparison(config, progress=_progress(args))
    export_results(result, config.output_dir)
    if not args.quiet:
        for algo, mean, std in result.summary():
            print(f"{algo}: final accuracy {mean:.4f} +/- {std:.4f}")
        print(f"results written to {config.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedl2t",
        description="Desk-scale personalized federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a multi-algorithm comparison")
    _add_common(p_run)
    p_run.add_argument(
        "--checkpoint-round",
        type=int,
        help="halt every cell after this round, leaving checkpoints in the output dir",
    )
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one hyperparameter")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=("lambda_c", "label_ratio", "mu"))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_export = sub.add_parser("export-data", help="write the synthetic dataset to a text file")
    _add_common(p_export)
    p_export.add_argument("--file", required=True, help="destination path")
    p_export.set_defaults(func=_cmd_export_data)

    p_resume = sub.add_parser("resume", help="finish a halted comparison from its checkpoints")
    _add_common(p_resume)
    p_resume.set_defaults(func=_cmd_resume)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FedL2TError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
