import types
import typing
from pathlib import Path

from pydantic import BaseModel
from pydantic import ValidationError as PydanticValidationError

from eda.utils.exceptions import ConfigError, UnknownConfigKeyError
from eda.utils.files import read_text


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """
    Parse flat `key = value` lines.

    Blank lines and lines starting with `#` are skipped; whitespace around keys
    and values is stripped. A repeated key is an error.
    """
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected `key = value`, got {raw!r}.")
        if key in values:
            raise ConfigError(f"{source}:{number}: key `{key}` is set twice.")
        values[key] = value.strip()
    return values


def _is_sequence(annotation: object) -> bool:
    if typing.get_origin(annotation) in (tuple, list):
        return True
    if typing.get_origin(annotation) in (typing.Union, types.UnionType):
        return any(_is_sequence(arg) for arg in typing.get_args(annotation))
    return False


def build_config[M: BaseModel](model: type[M], values: dict[str, str], **overrides: object) -> M:
    """
    Validate string values into `model`.

    Keys the model does not declare raise `UnknownConfigKeyError`; values of
    sequence fields are split on commas, the empty string being the empty
    sequence. `overrides` take precedence over `values`.
    """
    data: dict[str, object] = {}
    for key, value in values.items():
        field = model.model_fields.get(key)
        if field is None:
            raise UnknownConfigKeyError(key, model.__name__)
        if _is_sequence(field.annotation):
            data[key] = tuple(part.strip() for part in value.split(",") if part.strip())
        else:
            data[key] = value
    data.update(overrides)

    try:
        return model.model_validate(data)
    except PydanticValidationError as e:
        raise ConfigError(f"Invalid {model.__name__}: {e}") from e


def load_config[M: BaseModel](model: type[M], path: Path | str | None, **overrides: object) -> M:
    """Read a key=value file into `model`; without a path only the defaults and `overrides` apply."""
    values = parse_key_values(read_text(path), str(path)) if path is not None else {}
    return build_config(model, values, **overrides)
