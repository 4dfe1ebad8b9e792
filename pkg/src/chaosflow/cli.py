"""
Command-line interface for chaosflow experiments.
"""

import argparse
import logging
import sys
from . import __version__
from . import core
from .config import EXPERIMENTS, load_config, resolve_threads
from .errors import ChaosflowError, ConfigError, ExperimentFailure

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130


def parse_args(argv=None):
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        prog="chaosflow",
        description="chaosflow - chaos expansions for Brownian motion stopped at a barrier",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  chaosflow alpha --config configs/alpha.json
  chaosflow expand --config configs/expand.json --threads 8 --out results/expand
  chaosflow kv --config configs/kv.json --seed 7 --summary
        """
    )

    parser.add_argument(
        "--version",
        action="version",
        version=f"chaosflow {__version__}"
    )

    parser.add_argument(
        "experiment",
        choices=EXPERIMENTS,
        help="Experiment to run"
    )

    parser.add_argument(
        "--config",
        type=str,
        metavar="FILE",
        required=True,
        help="JSON experiment config"
    )

    parser.add_argument(
        "--seed",
        type=int,
        metavar="S",
        help="Override the config seed"
    )

    parser.add_argument(
        "--out",
        type=str,
        metavar="DIR",
        help="Output directory for report.json and CSV tables (default: config out_dir)"
    )

    parser.add_argument(
        "--threads",
        type=int,
        metavar="K",
        help="Worker threads (default: $CHAOSFLOW_THREADS, then the config, then 1)"
    )

    parser.add_argument(
        "--summary",
        action="store_true",
        help="Only show summary, no detailed output"
    )

    parser.add_argument(
        "--json",
        action="store_true",
        help="Output the report as JSON"
    )

    parser.add_argument(
        "-v", "--verbose",
        action="count",
        default=0,
        help="Log progress (-vv for debug output)"
    )

    return parser.parse_args(argv)


def setup_logging(verbosity):
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load(args):
    """Config with the command-line overrides applied, and the worker count."""
    config = load_config(args.config)
    if config.experiment != args.experiment:
        raise ConfigError(f"config {args.config} is for {config.experiment!r}, not {args.experiment!r}")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {args.seed}")
        config.seed = args.seed
    if args.out:
        config.out_dir = args.out
    return config, resolve_threads(args.threads, config)


def main(argv=None):
    """Main entry point for chaosflow CLI."""
    args = parse_args(argv)
    setup_logging(args.verbose)

    try:
        config, workers = load(args)

        # Run the experiment; nothing is written before it completes
        report, tables = core.run_experiment(config, workers)
        core.write_report(report, tables, config.out_dir)

        output = core.format_output(report, args.summary, args.json)
        print(output)

        # Exit code: 0 if every test passed, 1 if any failed
        if not report["all_pass"]:
            raise ExperimentFailure(report["failed"])

        sys.exit(EXIT_OK)

    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        sys.exit(EXIT_INTERRUPTED)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    except ChaosflowError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_FAILURE)


if __name__ == "__main__":
    main()
