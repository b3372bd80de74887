from __future__ import annotations

import argparse
import functools
import json
import logging
import sys
from typing import TYPE_CHECKING

import anyio

from modelzoo.config import ConfigError, load_config
from modelzoo.datasets import gen_dataset
from modelzoo.experiment import (
    ExperimentError,
    evaluate_experiment,
    run_experiment,
    run_experiments,
    sample_experiment,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

EXIT_ERROR = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modelzoo",
        description="Fit, sample and evaluate desk-scale probabilistic models.",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="logging level (default: INFO)",
    )
    verbs = parser.add_subparsers(dest="verb", required=True)
    for verb, help_text in (
        ("gen-data", "generate the configured dataset with its manifest"),
        ("fit", "fit the configured model and write metrics, checkpoint and samples"),
        ("sample", "draw samples from a fitted run's checkpoint"),
        ("eval", "score a fitted run against its dataset's ground truth"),
    ):
        sub = verbs.add_parser(verb, help=help_text)
        if verb == "fit":
            sub.add_argument(
                "--config",
                required=True,
                action="append",
                help="experiment config file; repeat to fit several runs concurrently",
            )
        else:
            sub.add_argument("--config", required=True, help="experiment config file")
        sub.add_argument("--out", default=None, help="output directory override")
        if verb == "sample":
            sub.add_argument("-n", type=int, default=None, help="number of samples")
    return parser


async def _gen_data(args: argparse.Namespace) -> None:
    config = await load_config(args.config)
    assert config is not None
    destination = args.out or config.dataset.path or f"{config.run.output_dir}/data"
    try:
        await gen_dataset(config.dataset, config.seed, destination)
    except Exception as e:
        raise ExperimentError(str(e), "datasets", "gen_dataset", "dataset") from e


async def _dispatch(args: argparse.Namespace) -> None:
    if args.verb == "gen-data":
        await _gen_data(args)
    elif args.verb == "fit":
        if len(args.config) == 1:
            await run_experiment(args.config[0], out=args.out)
        elif args.out is not None:
            raise ConfigError("--out applies to a single config", "run", "output_dir")
        else:
            await run_experiments(args.config)
    elif args.verb == "sample":
        await sample_experiment(args.config, out=args.out, n=args.n)
    else:
        await evaluate_experiment(args.config, out=args.out)


def error_line(e: Exception) -> str:
    """One JSON object describing a failure, for machine consumption."""
    return json.dumps(
        {
            "error": str(e),
            "type": e.__class__.__qualname__,
            "module": getattr(e, "module", None),
            "operation": getattr(e, "operation", None),
            "section": getattr(e, "section", None),
        }
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        anyio.run(functools.partial(_dispatch, args))
    except ConfigError as e:
        print(error_line(e), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(error_line(e), file=sys.stderr)
        return EXIT_ERROR
    return 0
