class EdaError(Exception):
    """Base class for every error raised by the laboratory."""


class ValidationError(EdaError, ValueError):
    """Raised when a value violates one of its invariants."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        self.detail = detail

        message = invariant if not detail else f"{invariant}: {detail}"
        super().__init__(message)


class EmptyInputError(EdaError, ValueError):
    """Raised when an operation needs at least one element and got none."""


class NonFiniteGradientError(EdaError, ArithmeticError):
    """Raised when an optimiser step receives a NaN or infinite gradient."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Non-finite gradient for parameter `{name}`; training halted.")


class ConfigError(EdaError):
    """Raised when a configuration or a set of command-line options cannot be used."""


class UnknownConfigKeyError(ConfigError):
    """Raised when a key=value config file names a key the config does not have."""

    def __init__(self, key: str, config_name: str):
        self.key = key
        super().__init__(f"Unknown key `{key}` for {config_name}.")


class IncompatibleOptionsError(ConfigError):
    """Raised when options would be silently ignored if the run went ahead."""


class DataError(EdaError):
    """Raised when a data file cannot be read back into the expected values."""


class MissingFileError(DataError):
    """Raised when an input file does not exist."""


class FormatVersionError(DataError):
    """Raised when a record file was written by an unsupported format version."""

    def __init__(self, found: str, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"Record file version {found!r} is not supported (expected {expected}).")


class TruncatedFileError(DataError):
    """Raised when a record file ends before the number of records announced in its header."""

    def __init__(self, record_index: int, expected_count: int):
        self.record_index = record_index
        self.expected_count = expected_count
        super().__init__(f"Record file truncated at record {record_index} (header announced {expected_count}).")


class SchemaMismatchError(DataError):
    """Raised when a record file holds another entity or another field layout than requested."""


class HorizonMismatchError(DataError):
    """Raised when files combined in one command disagree on the trajectory horizon."""


class UsageError(ConfigError):
    """Raised when the command line cannot be parsed."""


class InvalidRecordError(DataError):
    """Raised when a record parses but holds values its entity does not allow, such as NaN coordinates."""

    def __init__(self, record_index: int, detail: str):
        self.record_index = record_index
        self.detail = detail
        super().__init__(f"Record {record_index} is invalid: {detail}")
