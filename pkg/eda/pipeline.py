import dataclasses
import itertools
from collections.abc import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydis_core.utils import logging

from eda.anchors import fit_anchor_sets, schedule_for_evolve_times
from eda.assignment import Paradigm
from eda.constants import DEFAULT_EVOLVE_TIMES, DEFAULT_SEEDS, Split
from eda.core import AnchorSet, Scene
from eda.geometry import LengthMeasure
from eda.loss import ClsKind
from eda.metrics import (
    DEFAULT_K,
    DEFAULT_MISS_THRESHOLD,
    LayerMetrics,
    MetricsBundle,
    MetricsRow,
    ScoreMap,
    ScoreMode,
    evaluate,
    per_layer_metrics,
)
from eda.model import ModelParams
from eda.training import TrainConfig, forward_in_batches, train_model
from eda.utils.exceptions import (
    EmptyInputError,
    HorizonMismatchError,
    IncompatibleOptionsError,
    SchemaMismatchError,
)
from eda.utils.time import Stopwatch

log = logging.get_logger(__name__)


def split_scenes(scenes: Sequence[Scene], train_fraction: float | None = None) -> tuple[list[Scene], list[Scene]]:
    """The first `train_fraction` of the scenes for training, the rest held out."""
    fraction = Split.train_fraction if train_fraction is None else train_fraction
    if len(scenes) < 2:
        raise EmptyInputError(f"Splitting needs at least two scenes, got {len(scenes)}.")
    cut = min(max(int(len(scenes) * fraction), 1), len(scenes) - 1)
    return list(scenes[:cut]), list(scenes[cut:])


def check_compatible(params: ModelParams, scenes: Sequence[Scene]) -> None:
    """Raise when the scenes cannot be fed to a model with these parameters."""
    cfg = params.config
    for scene in scenes:
        if scene.gt_trajectory.horizon != cfg.horizon:
            raise HorizonMismatchError(
                f"The model predicts {cfg.horizon} steps but a scene has {scene.gt_trajectory.horizon}."
            )
        if scene.context.shape[0] != cfg.context_dim:
            raise SchemaMismatchError(
                f"The model reads {cfg.context_dim} context features but a scene has {scene.context.shape[0]}."
            )
        if scene.category not in params.anchors:
            raise SchemaMismatchError(f"The model has no anchors for category {scene.category}.")


def evaluate_model(
    params: ModelParams,
    scenes: Sequence[Scene],
    k: int = DEFAULT_K,
    *,
    score_map: ScoreMap = ScoreMap.SIGMOID,
    miss_threshold: float = DEFAULT_MISS_THRESHOLD,
    length_measure: LengthMeasure = LengthMeasure.ARC,
) -> tuple[MetricsBundle, list[LayerMetrics]]:
    """Final-layer metrics after NMS selection, and per-layer metrics over all components."""
    check_compatible(params, scenes)
    outputs = forward_in_batches(params, scenes)
    bundle = evaluate(
        [layers[-1] for layers in outputs],
        scenes,
        k,
        miss_threshold=miss_threshold,
        score_map=score_map,
        measure=length_measure,
    )
    return bundle, per_layer_metrics(outputs, scenes, miss_threshold)


class AblationMatrix(BaseModel):
    """The grid of EDA configurations to train, each once per seed."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    evolve_times: tuple[int, ...] = DEFAULT_EVOLVE_TIMES
    distinct: tuple[bool, ...] = (True, False)
    cls_kind: tuple[ClsKind, ...] = (ClsKind.BCE,)
    # Empty means every cell uses the given anchor file; otherwise anchors are refitted on the training split per count.
    num_anchors: tuple[int, ...] = ()
    anchor_seed: int = 0
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    score_mode: ScoreMode = ScoreMode.RANK
    k: int = Field(default=DEFAULT_K, ge=1)
    miss_threshold: float = Field(default=DEFAULT_MISS_THRESHOLD, gt=0)
    length_measure: LengthMeasure = LengthMeasure.ARC
    epochs: int = Field(default=30, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    lr_decay_epochs: tuple[int, ...] = (20, 25)
    batch_size: int = Field(default=64, ge=1)
    hidden_dim: int = Field(default=64, gt=0)
    num_layers: int = Field(default=6, gt=0)

    @field_validator("num_anchors")
    @classmethod
    def _check_anchor_counts(cls, counts: tuple[int, ...]) -> tuple[int, ...]:
        if any(count < 2 for count in counts):
            raise ValueError("a mixture needs at least 2 anchors per category")
        return counts

    def cells(self) -> list["AblationCell"]:
        """Every combination of the grid, in a fixed order."""
        return [
            AblationCell(evolve_times, distinct, cls_kind, num_anchors)
            for evolve_times, distinct, cls_kind, num_anchors in itertools.product(
                self.evolve_times, self.distinct, self.cls_kind, self.num_anchors or (None,)
            )
        ]

    def train_config(self, cell: "AblationCell", seed: int) -> TrainConfig:
        """Training settings of one cell and seed."""
        schedule = schedule_for_evolve_times(cell.evolve_times, self.num_layers)
        return TrainConfig(
            paradigm=Paradigm.EDA,
            evolve_layers=schedule.evolve_after_layers,
            distinct=cell.distinct,
            cls_kind=cell.cls_kind,
            epochs=self.epochs,
            lr=self.lr,
            lr_decay_epochs=tuple(epoch for epoch in self.lr_decay_epochs if epoch < self.epochs),
            batch_size=self.batch_size,
            seed=seed,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            length_measure=self.length_measure,
        )


@dataclasses.dataclass(frozen=True)
class AblationCell:
    """One combination of the ablation grid."""
    evolve_times: int
    distinct: bool
    cls_kind: ClsKind
    # None when the grid has no anchor-count axis.
    num_anchors: int | None = None

    @property
    def config_id(self) -> str:
        """Stable name of the cell, e.g. `evolve2-distinct-bce` or `evolve2-distinct-bce-anchors16`."""
        name = f"evolve{self.evolve_times}-{'distinct' if self.distinct else 'all'}-{self.cls_kind}"
        return name if self.num_anchors is None else f"{name}-anchors{self.num_anchors}"


@dataclasses.dataclass(frozen=True)
class AblationRun:
    """Metrics of one cell trained with one seed."""
    cell: AblationCell
    seed: int
    bundle: MetricsBundle
    layers: tuple[LayerMetrics, ...]


@dataclasses.dataclass(frozen=True)
class AblationReport:
    """Every run, plus per-cell medians over seeds."""

    runs: tuple[AblationRun, ...]
    summary: tuple[MetricsRow, ...]
    layers: dict[str, list[LayerMetrics]]


def _median_layers(runs: Sequence[AblationRun]) -> list[LayerMetrics]:
    stacked = np.array([[(row.min_ade, row.min_fde, row.miss_rate) for row in run.layers] for run in runs])
    medians = np.median(stacked, axis=0)
    return [
        LayerMetrics(layer + 1, float(ade), float(fde), float(miss)) for layer, (ade, fde, miss) in enumerate(medians)
    ]


def _median_row(cell: AblationCell, runs: Sequence[AblationRun], mode: ScoreMode) -> MetricsRow:
    rows = [
        MetricsRow.from_bundle(cell.config_id, cell.evolve_times, cell.distinct, str(cell.cls_kind), mode, run.bundle)
        for run in runs
    ]

    def median(field: str) -> float:
        return float(np.median([getattr(row, field) for row in rows]))

    return dataclasses.replace(
        rows[0],
        min_ade=median("min_ade"),
        min_fde=median("min_fde"),
        miss_rate=median("miss_rate"),
        map=median("map"),
        endpoint_spread=median("endpoint_spread"),
    )


def _refit_anchor_sets(train_scenes: Sequence[Scene], count: int, seed: int) -> dict[int, AnchorSet]:
    endpoints = np.stack([scene.gt_trajectory.endpoint for scene in train_scenes])
    categories = [scene.category for scene in train_scenes]
    fitted = fit_anchor_sets(endpoints, categories, count, seed)
    log.debug(f"Refitted {count} anchors for categories {sorted(fitted)} on {len(train_scenes)} training scenes")
    return {category: anchor_set for category, (anchor_set, _) in fitted.items()}


def run_ablation(
    train_scenes: Sequence[Scene],
    eval_scenes: Sequence[Scene],
    anchor_sets: Mapping[int, AnchorSet] | None,
    matrix: AblationMatrix,
) -> AblationReport:
    """
    Train and evaluate every cell of the grid for every seed, in a fixed order.

    Cells on the anchor-count axis use anchors refitted by k-means on
    `train_scenes`; the others use `anchor_sets`.
    """
    if anchor_sets is None and not matrix.num_anchors:
        raise IncompatibleOptionsError("An ablation without an anchor-count axis needs an anchor file.")
    refitted = {count: _refit_anchor_sets(train_scenes, count, matrix.anchor_seed) for count in matrix.num_anchors}

    stopwatch = Stopwatch()
    runs = []
    cells = matrix.cells()
    for cell in cells:
        cell_anchors = anchor_sets if cell.num_anchors is None else refitted[cell.num_anchors]
        for seed in matrix.seeds:
            cfg = matrix.train_config(cell, seed)
            log.info(f"Ablation run {cell.config_id} seed {seed} [{stopwatch.humanize()}]")
            result = train_model(train_scenes, cell_anchors, cfg)
            bundle, layers = evaluate_model(
                result.params,
                eval_scenes,
                matrix.k,
                score_map=cfg.score_map,
                miss_threshold=matrix.miss_threshold,
                length_measure=matrix.length_measure,
            )
            runs.append(AblationRun(cell, seed, bundle, tuple(layers)))

    summary, layer_medians = [], {}
    for cell in cells:
        cell_runs = [run for run in runs if run.cell == cell]
        summary.append(_median_row(cell, cell_runs, matrix.score_mode))
        layer_medians[cell.config_id] = _median_layers(cell_runs)
    return AblationReport(tuple(runs), tuple(summary), layer_medians)
