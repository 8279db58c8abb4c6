"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, runner
from .bayes_cls import McmcError
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import FeatureFileError, EpisodeError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfrl", description="Merged-task representation learning with tail averaging "
                                "and probabilistic few-shot heads.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help, checkpoint=False, which=False):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=True, metavar="PATH")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, metavar="PATH")
        if which:
            sp.add_argument("--which", choices=("sgd", "swa"), default="swa")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: experiment.out_dir)")
        sp.add_argument("--seed", type=int, help="overrides experiment.seed")
        return sp

    add("train", "train the backbone and write a checkpoint")
    add("evaluate", "few-shot evaluation of a checkpoint", checkpoint=True, which=True)
    add("spectrum", "singular values of pooled meta-test features", checkpoint=True, which=True)
    add("sweep", "grid over the averaging learning rate and length")
    add("compare-averaging", "no averaging vs EMA vs SWA off one trajectory")
    return p


def _write(out_dir: Path, files: dict[str, str | bytes]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        path = out_dir / name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content)


def run(args) -> int:
    overrides = {"experiment.seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    out_dir = Path(args.out or cfg.experiment.out_dir)
    setup = runner.build_setup(cfg)
    if args.command == "train":
        ck, outputs, _ = runner.train(cfg, setup)
        files = {**outputs.files, "checkpoint.bin": checkpoint.to_bytes(ck)}
    elif args.command in ("evaluate", "spectrum"):
        ck = checkpoint.load(args.checkpoint)
        if args.command == "evaluate":
            outputs = runner.evaluate(cfg, ck, args.which, setup)
        else:
            outputs, _ = runner.spectrum(cfg, ck, args.which, setup)
        files = outputs.files
    elif args.command == "sweep":
        outputs = runner.sweep(cfg, setup)
        files = outputs.files
    else:
        outputs, _ = runner.compare_averaging(cfg, setup)
        files = outputs.files
    _write(out_dir, files)
    for line in outputs.summary:
        print(line)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return run(args)
    except (ConfigError, EpisodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, McmcError, np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, FeatureFileError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
