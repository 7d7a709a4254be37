import contextlib
import csv
import io
import os
import tempfile
from collections.abc import Iterable, Sequence
from pathlib import Path

from eda.utils.exceptions import MissingFileError


def atomic_write_text(path: Path | str, text: str) -> None:
    """Write `text` to a temporary file next to `path`, then rename it over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as file:
            file.write(text)
        os.replace(temp_name, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(temp_name)
        raise


def read_text(path: Path | str) -> str:
    """Read a UTF-8 text file, raising `MissingFileError` when it does not exist."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"File `{path}` does not exist.")
    return path.read_text(encoding="utf-8")


def format_real(value: float) -> str:
    """Render a float with 17 significant digits, enough to read back the exact 64-bit value."""
    return format(float(value), ".17g")


def write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    """Atomically write a CSV file; floats are rendered with `format_real`."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_real(cell) if isinstance(cell, float) else cell for cell in row])
    atomic_write_text(path, buffer.getvalue())


def read_csv(path: Path | str) -> list[dict[str, str]]:
    """Read a CSV file with a header row into one dict per row."""
    return list(csv.DictReader(io.StringIO(read_text(path))))
