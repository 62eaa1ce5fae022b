"""``divlab`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as cfgmod
from . import pipeline
from .errors import (
    ConfigError,
    ContractError,
    DegenerateEmbeddingError,
    DivlabError,
    MissingDependencyError,
    NumericError,
    TrainingError,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--data-dir", help="dataset directory (default: <out-dir>/data)")
    common.add_argument("--out-dir", help="output directory (default: $DIVLAB_OUT or config)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--uncontrolled", action="store_true",
                        help="scale training steps with dataset size instead of fixing them")
    common.add_argument("--force", action="store_true", help="recompute and overwrite outputs")
    common.add_argument("--label-mode", choices=("sampled", "empirical"),
                        help="labels used for the Fisher expectation")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. learners.outer_lr=0.01")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="divlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic DVDS datasets")
    sub.add_parser("pretrain-probe", parents=[common], help="train the frozen probe network")
    div = sub.add_parser("diversity", parents=[common], help="diversity coefficient per dataset")
    div.add_argument("--pretrain-probe", action="store_true",
                     help="train the probe first if none exists")
    sub.add_parser("train", parents=[common], help="train every learner on every dataset")
    sub.add_parser("evaluate", parents=[common], help="few-shot test accuracy and loss")
    sub.add_parser("correlate", parents=[common], help="R² of performance on diversity")
    sub.add_parser("run-all", parents=[common], help="every stage in order")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def resolve_config(args, environ=None):
    environ = os.environ if environ is None else environ
    overrides = [cfgmod.parse_override(s) for s in args.set]
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.workers is not None:
        overrides.append(("workers", args.workers))
    if args.uncontrolled:
        overrides.append(("learners.uncontrolled", True))
    if args.label_mode:
        overrides.append(("diversity.label_mode", args.label_mode))
    if args.data_dir:
        overrides.append(("data_dir", args.data_dir))
    if args.out_dir:
        overrides.append(("output_dir", args.out_dir))
    elif environ.get("DIVLAB_OUT"):
        overrides.append(("output_dir", environ["DIVLAB_OUT"]))
    return cfgmod.load_config(args.config, overrides)


def dispatch(args, cfg):
    force = args.force
    if args.command == "show-config":
        sys.stdout.write(cfgmod.dump(cfg))
        print(f"# config_hash {cfgmod.config_hash(cfg)}")
    elif args.command == "gen-data":
        pipeline.gen_data(cfg, force)
    elif args.command == "pretrain-probe":
        pipeline.pretrain(cfg, force)
    elif args.command == "diversity":
        pipeline.measure_diversity(cfg, force, pretrain_missing=args.pretrain_probe)
    elif args.command == "train":
        pipeline.train_grid(cfg, force)
    elif args.command == "evaluate":
        pipeline.evaluate_grid(cfg, force)
    elif args.command == "correlate":
        pipeline.correlate(cfg, force)
    elif args.command == "run-all":
        pipeline.run_all(cfg, force)


def exit_code(exc):
    if isinstance(exc, (ConfigError, ContractError)):
        return EXIT_CONFIG
    if isinstance(exc, MissingDependencyError):
        return EXIT_MISSING
    if isinstance(exc, (NumericError, TrainingError, DegenerateEmbeddingError)):
        return EXIT_NUMERIC
    return EXIT_OTHER


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    logging.getLogger("divlab").setLevel(level)
    try:
        cfg = resolve_config(args)
        dispatch(args, cfg)
    except DivlabError as exc:
        print(f"divlab: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except ImportError as exc:
        print(f"divlab: missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
