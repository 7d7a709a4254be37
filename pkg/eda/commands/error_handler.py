import sys

from pydis_core.utils.logging import get_logger

from eda.utils.exceptions import ConfigError, DataError, EdaError

log = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


def handle_command_error(command: str, error: Exception) -> int:
    """
    Report an error raised by `command` and return the process exit code.

    Configuration and usage problems exit with 1 and data problems with 2.
    Anything else is unexpected: it is logged with its traceback, which also
    reports it to Sentry, and exits with 2.
    """
    log.trace(f"Handling a {type(error).__name__} raised from {command}")

    if isinstance(error, ConfigError):
        print(f"{command}: configuration error: {error}", file=sys.stderr)
        return EXIT_USAGE

    if isinstance(error, DataError):
        print(f"{command}: data error: {error}", file=sys.stderr)
        return EXIT_DATA

    if isinstance(error, EdaError):
        print(f"{command}: {type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_DATA

    log.exception(f"Unexpected error while running {command}", exc_info=error)
    print(f"{command}: unexpected error: {type(error).__name__}: {error}", file=sys.stderr)
    return EXIT_DATA
