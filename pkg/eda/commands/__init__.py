import argparse
import sys
from collections.abc import Sequence
from typing import NoReturn

from pydis_core.utils.logging import get_logger

from eda.commands import data, evaluation, training
from eda.commands.error_handler import EXIT_OK, handle_command_error
from eda.utils.exceptions import UsageError

log = get_logger(__name__)

COMMAND_MODULES = (data, training, evaluation)


class ArgumentParser(argparse.ArgumentParser):
    """Raises `UsageError` instead of exiting, so usage problems share the exit-code mapping."""

    def error(self, message: str) -> NoReturn:
        """Raise `UsageError` after printing the usage line."""
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    """The `eda` parser with every sub-command registered."""
    parser = ArgumentParser(prog="eda", description="Desk-scale label-assignment laboratory for trajectory mixtures.")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
    for module in COMMAND_MODULES:
        module.register(subparsers)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Parse `argv`, run the chosen command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return handle_command_error(parser.prog, e)

    log.debug(f"Running `{args.command}`.")
    try:
        args.func(args)
    except Exception as e:
        return handle_command_error(args.command, e)
    return EXIT_OK
