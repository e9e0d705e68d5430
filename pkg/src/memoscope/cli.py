"""Command line for the experiment runners.

One subcommand per experiment, plus `make-data` for the synthetic IDX corpus.
Common flags: --config (flat key=value file), --out, --seed, --workers,
--mnist-dir (or the MEMOSCOPE_MNIST_DIR environment variable), --set for any
config key.  Precedence: flags > config file > built-in defaults.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .experiments import EXPERIMENT_KINDS, build_config, run_experiment


def _add_common(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    parser.add_argument("--workers", type=int, default=1,
                        help="process pool size for sweep cells (default 1)")
    parser.add_argument("--mnist-dir", default=None,
                        help="directory of IDX files; implies data.source=idx")
    parser.add_argument("--no-plot", action="store_true",
                        help="skip figure rendering, write CSVs only")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")


def _overrides_from(args):
    overrides = {}
    if args.mnist_dir:
        overrides["data.source"] = "idx"
        overrides["data.dir"] = args.mnist_dir
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="memoscope",
        description="Memorization measurements for gradient-trained MLPs.")
    parser.add_argument("--version", action="version", version=f"memoscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for kind in EXPERIMENT_KINDS:
        cmd = sub.add_parser(kind.replace("_", "-"), help=f"run the {kind} experiment")
        _add_common(cmd)
        cmd.set_defaults(kind=kind)

    make_data = sub.add_parser(
        "make-data", help="write the deterministic synthetic digit corpus as IDX files")
    make_data.add_argument("--out", required=True)
    make_data.add_argument("--train-count", type=int, default=12000)
    make_data.add_argument("--val-count", type=int, default=10000)
    make_data.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)

    if args.command == "make-data":
        from .synthdigits import write_corpus

        write_corpus(args.out, args.train_count, args.val_count, args.seed)
        print(f"wrote corpus to {args.out}")
        return 0

    cfg = build_config(kind=args.kind, out_dir=args.out, seed=args.seed,
                       workers=args.workers, plots=not args.no_plot,
                       config_path=args.config, overrides=_overrides_from(args))
    summary = run_experiment(cfg)
    for path in summary["artifacts"]:
        print(path)
    print(summary["manifest"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
