import dataclasses
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np
from pydis_core.utils import logging

from eda.core import Anchor, AnchorSet, Scene, Trajectory, validate
from eda.metrics import LayerMetrics, MetricsRow
from eda.model import ModelConfig, ModelParams
from eda.utils.exceptions import (
    FormatVersionError,
    InvalidRecordError,
    SchemaMismatchError,
    TruncatedFileError,
)
from eda.utils.files import atomic_write_text, format_real, read_csv, read_text, write_csv

log = logging.get_logger(__name__)

FORMAT_VERSION = 1

SCENES = "scenes"
ANCHORS = "anchors"
CHECKPOINT = "checkpoint"

ANCHOR_SCHEMA = ("category", "index", "x", "y")
ARRAY_SCHEMA = ("name", "ndim", "shape", "values")


@dataclasses.dataclass(frozen=True)
class RecordHeader:
    """
    Parsed first line of a record file.

    The line is space-separated `key=value` tokens,
    `format=edar-<kind> version=1 schema=<field,...> count=<N> [extras]`, and is
    followed by exactly N records, one per line. Reals are written with 17
    significant digits so every 64-bit value reads back exactly.
    """

    kind: str
    schema: tuple[str, ...]
    count: int
    extras: dict[str, str] = dataclasses.field(default_factory=dict)
    version: int = FORMAT_VERSION

    def render(self) -> str:
        """The header line, without its newline."""
        tokens = [
            f"format=edar-{self.kind}",
            f"version={self.version}",
            f"schema={','.join(self.schema)}",
            f"count={self.count}",
        ]
        tokens.extend(f"{key}={value}" for key, value in self.extras.items())
        return " ".join(tokens)


def _render_field(value: object) -> str:
    if isinstance(value, float | np.floating):
        return format_real(value)
    return str(value)


def _write_records(path: Path | str, header: RecordHeader, records: Iterable[Sequence[object]]) -> None:
    lines = [header.render()]
    lines.extend(" ".join(_render_field(field) for field in record) for record in records)
    atomic_write_text(path, "\n".join(lines) + "\n")
    log.debug(f"Wrote {header.count} {header.kind} records to {path}.")


def _parse_header(line: str, kind: str) -> RecordHeader:
    tokens = {}
    for token in line.split(" "):
        key, sep, value = token.partition("=")
        if not sep:
            raise SchemaMismatchError(f"Malformed header token `{token}`.")
        tokens[key] = value

    found_format = tokens.pop("format", "")
    if found_format != f"edar-{kind}":
        raise SchemaMismatchError(f"Expected an edar-{kind} file, found format `{found_format or '<none>'}`.")
    version = tokens.pop("version", "")
    if version != str(FORMAT_VERSION):
        raise FormatVersionError(version, FORMAT_VERSION)
    try:
        count = int(tokens.pop("count"))
        schema = tuple(tokens.pop("schema").split(","))
    except (KeyError, ValueError) as e:
        raise SchemaMismatchError(f"Header of the edar-{kind} file lacks a valid schema or count.") from e
    return RecordHeader(kind, schema, count, tokens)


def _read_records(path: Path | str, kind: str) -> tuple[RecordHeader, list[list[str]]]:
    """Header and the raw fields of every record; checks the version and the record count."""
    text = read_text(path)
    if not text:
        raise SchemaMismatchError(f"`{path}` is empty.")
    lines = text.split("\n")
    header = _parse_header(lines[0], kind)

    # A complete file ends with a newline, which leaves one empty string after the split.
    body = lines[1:]
    complete = body[-1] == "" if body else False
    if complete:
        body = body[:-1]
    elif body:
        raise TruncatedFileError(len(body) - 1, header.count)

    if len(body) < header.count:
        raise TruncatedFileError(len(body), header.count)
    if len(body) > header.count:
        raise SchemaMismatchError(f"`{path}` holds {len(body)} records but its header announces {header.count}.")
    return header, [line.split(" ") for line in body]


def _check_schema(header: RecordHeader, expected: Sequence[str]) -> None:
    if header.schema != tuple(expected):
        raise SchemaMismatchError(f"Schema {','.join(header.schema)} does not match {','.join(expected)}.")


def _check_width(fields: list[str], width: int, index: int, count: int) -> None:
    if len(fields) < width:
        raise TruncatedFileError(index, count)
    if len(fields) > width:
        raise SchemaMismatchError(f"Record {index} has {len(fields)} fields, expected {width}.")


def _int_extra(header: RecordHeader, key: str) -> int:
    try:
        return int(header.extras[key])
    except (KeyError, ValueError) as e:
        raise SchemaMismatchError(f"Header of the edar-{header.kind} file lacks a valid `{key}`.") from e


def scene_schema(context_dim: int, horizon: int) -> tuple[str, ...]:
    """Field names of a scene record."""
    return ("category", "latent_mode", f"context:{context_dim}", f"points:{horizon}x2")


def save_scenes(path: Path | str, scenes: Sequence[Scene]) -> None:
    """Write a dataset; all scenes must share the context width, horizon and time step."""
    context_dim = scenes[0].context.shape[0] if scenes else 0
    horizon = scenes[0].gt_trajectory.horizon if scenes else 0
    dt = scenes[0].gt_trajectory.dt if scenes else 0.5
    header = RecordHeader(
        SCENES,
        scene_schema(context_dim, horizon),
        len(scenes),
        {"context_dim": str(context_dim), "horizon": str(horizon), "dt": format_real(dt)},
    )
    records = (
        [scene.category, scene.latent_mode, *scene.context, *scene.gt_trajectory.points.ravel()] for scene in scenes
    )
    _write_records(path, header, records)


def load_scenes(path: Path | str) -> list[Scene]:
    """Read a scene file written by `save_scenes`."""
    header, records = _read_records(path, SCENES)
    context_dim = _int_extra(header, "context_dim")
    horizon = _int_extra(header, "horizon")
    _check_schema(header, scene_schema(context_dim, horizon))
    dt = float(header.extras.get("dt", "0.5"))

    width = 2 + context_dim + 2 * horizon
    scenes = []
    for index, fields in enumerate(records):
        _check_width(fields, width, index, header.count)
        try:
            values = np.array(fields[2:], dtype=np.float64)
            points = values[context_dim:].reshape(horizon, 2)
            scene = Scene(values[:context_dim], Trajectory(points, dt), int(fields[1]), int(fields[0]))
            scenes.append(validate(scene, context_dim=context_dim, horizon=horizon))
        except ValueError as e:
            raise InvalidRecordError(index, str(e)) from e
    return scenes


def save_anchors(path: Path | str, anchor_sets: Mapping[int, AnchorSet]) -> None:
    """Write the predefined anchor endpoints of every category."""
    records = [
        [category, index, float(x), float(y)]
        for category in sorted(anchor_sets)
        for index, (x, y) in enumerate(anchor_sets[category].endpoints)
    ]
    _write_records(path, RecordHeader(ANCHORS, ANCHOR_SCHEMA, len(records)), records)


def load_anchors(path: Path | str) -> dict[int, AnchorSet]:
    """Read an anchor file written by `save_anchors`."""
    header, records = _read_records(path, ANCHORS)
    _check_schema(header, ANCHOR_SCHEMA)

    endpoints: dict[int, list[tuple[float, float]]] = {}
    for index, fields in enumerate(records):
        _check_width(fields, len(ANCHOR_SCHEMA), index, header.count)
        try:
            category, position = int(fields[0]), int(fields[1])
            anchor = validate(Anchor.predefined((float(fields[2]), float(fields[3]))))
        except ValueError as e:
            raise InvalidRecordError(index, str(e)) from e
        points = endpoints.setdefault(category, [])
        if position != len(points):
            raise SchemaMismatchError(f"Record {index}: anchor index {position} is out of order.")
        points.append(anchor.endpoint)
    return {category: AnchorSet.from_endpoints(points, category) for category, points in sorted(endpoints.items())}


@dataclasses.dataclass(frozen=True, eq=False)
class Checkpoint:
    """Trained parameters plus the flat string metadata of the run that produced them."""

    params: ModelParams
    metadata: dict[str, str] = dataclasses.field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.params == other.params and self.metadata == other.metadata

    __hash__ = None


def _array_record(name: str, array: np.ndarray) -> list[object]:
    return [name, array.ndim, "x".join(str(size) for size in array.shape) or "-", *array.ravel().tolist()]


def save_checkpoint(path: Path | str, checkpoint: Checkpoint) -> None:
    """
    Write parameters one array per line (`name ndim shape values...`).

    The model config and the metadata travel in the header as `model.<field>`
    and `meta.<key>` tokens; metadata values must not contain spaces.
    """
    params = checkpoint.params
    extras = {f"model.{key}": _render_field(value) for key, value in params.config.model_dump().items()}
    for key, value in checkpoint.metadata.items():
        if " " in value or " " in key:
            raise ValueError(f"Checkpoint metadata `{key}` must not contain spaces.")
        extras[f"meta.{key}"] = value

    records = [_array_record(name, params[name]) for name in params.names]
    records.extend(
        _array_record(f"anchors.{category}", params.anchors[category]) for category in sorted(params.anchors)
    )
    _write_records(path, RecordHeader(CHECKPOINT, ARRAY_SCHEMA, len(records), extras), records)


def _prefixed(extras: Mapping[str, str], prefix: str) -> dict[str, str]:
    return {key.removeprefix(prefix): value for key, value in extras.items() if key.startswith(prefix)}


def load_checkpoint(path: Path | str) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`."""
    header, records = _read_records(path, CHECKPOINT)
    _check_schema(header, ARRAY_SCHEMA)

    config_fields = _prefixed(header.extras, "model.")
    metadata = _prefixed(header.extras, "meta.")
    try:
        config = ModelConfig.model_validate(config_fields)
    except ValueError as e:
        raise SchemaMismatchError(f"Checkpoint header holds an invalid model config: {e}") from e

    arrays: dict[str, np.ndarray] = {}
    anchors: dict[int, np.ndarray] = {}
    for index, fields in enumerate(records):
        if len(fields) < 3:
            raise TruncatedFileError(index, header.count)
        name = fields[0]
        try:
            ndim, shape_text = int(fields[1]), fields[2]
            shape = () if shape_text == "-" else tuple(int(size) for size in shape_text.split("x"))
        except ValueError as e:
            raise InvalidRecordError(index, f"`{name}` has a malformed shape: {e}") from e
        if len(shape) != ndim:
            raise SchemaMismatchError(f"Record {index} (`{name}`) declares {ndim} dimensions but shape {shape_text}.")
        _check_width(fields, 3 + int(np.prod(shape, dtype=np.int64)), index, header.count)
        try:
            array = np.array(fields[3:], dtype=np.float64).reshape(shape)
        except ValueError as e:
            raise InvalidRecordError(index, f"`{name}` holds a non-numeric value: {e}") from e
        if not np.all(np.isfinite(array)):
            raise InvalidRecordError(index, f"`{name}` holds NaN or infinite values")
        if name.startswith("anchors."):
            anchors[int(name.removeprefix("anchors."))] = array
        else:
            arrays[name] = array
    return Checkpoint(ModelParams(config, arrays, anchors), metadata)


METRICS_HEADER = tuple(field.name for field in dataclasses.fields(MetricsRow))
LAYERS_HEADER = ("config_id", "layer", "min_ade", "min_fde", "miss_rate")


def save_metrics(path: Path | str, rows: Sequence[MetricsRow]) -> None:
    """Write metrics.csv: a header row, then one row per configuration."""
    write_csv(path, METRICS_HEADER, (dataclasses.astuple(row) for row in rows))


def load_metrics(path: Path | str) -> list[MetricsRow]:
    """Read a metrics table written by `save_metrics`."""
    rows = read_csv(path)
    if rows and tuple(rows[0]) != METRICS_HEADER:
        raise SchemaMismatchError(f"`{path}` has columns {','.join(rows[0])}, expected {','.join(METRICS_HEADER)}.")
    return [
        MetricsRow(
            config_id=row["config_id"],
            evolve_times=int(row["evolve_times"]),
            distinct=row["distinct"] == "True",
            cls_kind=row["cls_kind"],
            score_mode=row["score_mode"],
            min_ade=float(row["min_ade"]),
            min_fde=float(row["min_fde"]),
            miss_rate=float(row["miss_rate"]),
            map=float(row["map"]),
            endpoint_spread=float(row["endpoint_spread"]),
        )
        for row in rows
    ]


def save_layer_metrics(path: Path | str, rows: Mapping[str, Sequence[LayerMetrics]]) -> None:
    """Write layers.csv: per configuration, one row per decoder layer."""
    write_csv(
        path,
        LAYERS_HEADER,
        (
            (config_id, layer.layer, layer.min_ade, layer.min_fde, layer.miss_rate)
            for config_id, layers in rows.items()
            for layer in layers
        ),
    )


def load_layer_metrics(path: Path | str) -> dict[str, list[LayerMetrics]]:
    """Read per-layer rows written by `save_layer_metrics`, grouped by configuration."""
    rows = read_csv(path)
    if rows and tuple(rows[0]) != LAYERS_HEADER:
        raise SchemaMismatchError(f"`{path}` has columns {','.join(rows[0])}, expected {','.join(LAYERS_HEADER)}.")
    series: dict[str, list[LayerMetrics]] = {}
    for row in rows:
        series.setdefault(row["config_id"], []).append(
            LayerMetrics(int(row["layer"]), float(row["min_ade"]), float(row["min_fde"]), float(row["miss_rate"]))
        )
    return series
