"""Command-line entry point: python app.py <command> [options] [--config.key value ...]."""
# Load environment variables FIRST before importing anything else
from dotenv import load_dotenv
load_dotenv()

import argparse
import logging
import sys
from typing import List, Optional

import torch

import config
from commands import COMMANDS
from commands.common import parse_overrides
from core.errors import ConfigError, GsdfError

# Configure logging
logging.basicConfig(
    level=getattr(logging, config.LOG_LEVEL, logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsdf",
        description="Gaussian splatting + neural SDF reconstruction on synthetic scenes",
    )
    parser.add_argument("--threads", type=int, default=config.THREADS,
                        help="Intra-op threads (0 = hardware default)")
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.VERSION}")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    for name, module in COMMANDS.items():
        sub = subparsers.add_parser(
            name, help=module.HELP, description=module.HELP, allow_abbrev=False,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        module.add_arguments(sub)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse, dispatch and map errors to exit codes (0 ok, 1 error, 2 usage, 3 config)."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    if args.threads > 0:
        torch.set_num_threads(args.threads)
    if config.DEVICE != "cpu":
        logger.warning(f"GSDF_DEVICE={config.DEVICE} is not supported; running on cpu")

    try:
        overrides = parse_overrides(rest)
        return COMMANDS[args.command].run(args, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except GsdfError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"Unhandled exception in '{args.command}': {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
