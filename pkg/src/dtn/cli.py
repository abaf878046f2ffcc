"""Command line driver: ``dtn {fetch,train,ablate,eval,transfer}``.

Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.
Human-readable progress goes to stdout one record per line; metrics and
tables are written to files under the run directory.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import data as datamod
from . import experiments
from .config import ConfigError, ExperimentConfig
from .exceptions import UsageError

logger = logging.getLogger("dtn")


def _global_options(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default(None), help="experiment config file")
    parser.add_argument("--seed", type=int, default=default(None), help="override train.seed")
    parser.add_argument("--out", default=default("runs"), help="directory for run outputs")
    parser.add_argument("--data-dir", default=default(None),
                        help="dataset cache (default: $DTN_DATA_DIR or ~/.cache/dtn)")
    parser.add_argument("--dry-run", action="store_true", default=default(False),
                        help="validate inputs without training")
    parser.add_argument("-v", "--verbose", action="count", default=default(0))


def build_parser():
    parser = argparse.ArgumentParser(prog="dtn", description=__doc__.splitlines()[0])
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", parents=[common], help="download and cache a dataset split")
    p.add_argument("dataset", choices=["svhn", "mnist"])
    p.add_argument("split")

    p = sub.add_parser("train", parents=[common], help="train what the config's run.task names")
    p.add_argument("config_path", nargs="?", help="config file (or use --config)")

    p = sub.add_parser("ablate", parents=[common], help="run the ablation or unseen-digit suite")
    p.add_argument("config_path", nargs="?", help="base config file (or use --config)")
    p.add_argument("--suite", choices=["ablation", "unseen"], default="ablation")
    p.add_argument("--digit", type=int, default=3, help="digit omitted by the unseen suite")

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained transfer run")
    p.add_argument("run_dir")
    p.add_argument("suite", help=f"one of: {', '.join(experiments.EVAL_SUITES)}")
    p.add_argument("--classifier", help="evaluation classifier run or checkpoint directory")
    p.add_argument("--digit", type=int, help="digit for the unseen suite")

    p = sub.add_parser("transfer", parents=[common], help="transfer image files with a trained run")
    p.add_argument("run_dir")
    p.add_argument("inputs", nargs="*")
    p.add_argument("-o", "--output-dir", default="transferred")
    return parser


def _cache_dir(args):
    return Path(args.data_dir) if args.data_dir else datamod.default_cache_dir()


def _load_config(args, parser):
    path = getattr(args, "config_path", None) or args.config
    if not path:
        parser.error("a config file is required (positional or --config)")
    cfg = ExperimentConfig.load(path)
    if args.seed is not None:
        cfg = cfg.with_overrides(**{"train.seed": args.seed})
    return cfg


def cmd_fetch(args):
    cache_dir = _cache_dir(args)
    dataset, split = args.dataset, args.split.lower()
    if (dataset, split) not in datamod.SOURCES:
        raise UsageError(f"unknown split {dataset}/{split}")
    cached = datamod.load_cached(cache_dir, dataset, split) is not None
    if args.dry_run:
        print(f"{dataset}/{split}\t{'cached' if cached else 'not cached'}")
        return 0
    result = datamod.fetch(dataset, split, cache_dir)
    print(f"{dataset}/{split}\t{len(result)}\tsha256={result.source_checksum}\t"
          f"{'cached' if cached else 'downloaded'}")
    return 0


def cmd_train(args, parser):
    cfg = _load_config(args, parser)
    if args.dry_run:
        print(f"config ok\t{cfg.hash()[:8]}\ttask={cfg['run.task']}")
        return 0
    experiments.run_train(cfg, args.out, _cache_dir(args))
    return 0


def cmd_ablate(args, parser):
    cfg = _load_config(args, parser)
    if args.dry_run:
        print(f"config ok\t{cfg.hash()[:8]}\tsuite={args.suite}")
        return 0
    if args.suite == "unseen":
        run_dir, _ = experiments.run_unseen_digit_suite(cfg, args.out, _cache_dir(args), args.digit)
        failed = False
    else:
        run_dir, rows = experiments.run_ablation(cfg, args.out, _cache_dir(args))
        failed = any(err for _, _, err in rows)
    print(f"run\t{run_dir}")
    return 1 if failed else 0


def cmd_eval(args):
    if args.suite not in experiments.EVAL_SUITES:
        raise UsageError(
            f"unknown suite {args.suite!r}; valid suites: {', '.join(experiments.EVAL_SUITES)}"
        )
    if args.dry_run:
        experiments.load_run_config(args.run_dir)
        print(f"eval\t{args.suite}\tok")
        return 0
    experiments.evaluate(args.run_dir, args.suite, _cache_dir(args),
                         classifier=args.classifier, digit=args.digit)
    return 0


def cmd_transfer(args):
    if not args.inputs:
        raise UsageError("no input images given")
    written, failed = experiments.transfer_images(args.run_dir, args.inputs, args.output_dir)
    if not written:
        print("error: no input could be decoded", file=sys.stderr)
        return 1
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "fetch":
            return cmd_fetch(args)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "ablate":
            return cmd_ablate(args, parser)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_transfer(args)
    except (UsageError, ConfigError) as exc:
        print(f"dtn: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"dtn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
