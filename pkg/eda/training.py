import dataclasses
from collections.abc import Callable, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydis_core.utils import logging

from eda.anchors import EvolveSchedule, anchors_for_layer, select_distinct
from eda.assignment import (
    Paradigm,
    match_anchor_based,
    match_eda,
    match_endpoints_batch,
    match_prediction_based,
    match_trajectories_batch,
)
from eda.core import AnchorSet, MatchBatch, MatchResult, MixtureOutput, Scene
from eda.geometry import LengthMeasure, adaptive_threshold, adaptive_thresholds, greedy_nms_masks
from eda.loss import ClsKind, LossConfig, mixture_loss_batch
from eda.metrics import ScoreMap
from eda.model import (
    AdamState,
    ForwardPass,
    ModelConfig,
    ModelParams,
    adam_step,
    backward_pass,
    forward_batch,
    forward_pass,
    init_model,
)
from eda.utils.exceptions import IncompatibleOptionsError
from eda.utils.time import Stopwatch

log = logging.get_logger(__name__)

DEFAULT_EVOLVE_LAYERS = (2, 4)


class TrainConfig(BaseModel):
    """Assignment paradigm, optimiser settings and decoder size of one training run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    paradigm: Paradigm = Paradigm.EDA
    # Left unset, EDA evolves after DEFAULT_EVOLVE_LAYERS and the other paradigms never evolve.
    evolve_layers: tuple[int, ...] = DEFAULT_EVOLVE_LAYERS
    # None resolves to on for the EDA paradigm and off otherwise.
    distinct: bool | None = None
    cls_kind: ClsKind = ClsKind.BCE
    lambda_reg: float = Field(default=1.0, ge=0)
    lambda_cls: float = Field(default=1.0, ge=0)
    epochs: int = Field(default=30, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0
    # The learning rate is multiplied by lr_decay_factor once each listed epoch has been completed.
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = Field(default=0.5, gt=0, le=1)
    weight_decay: float = Field(default=0.0, ge=0)
    hidden_dim: int = Field(default=64, gt=0)
    num_layers: int = Field(default=6, gt=0)
    # How the top-scored trajectory is measured when sizing the distinct-anchor NMS radius.
    length_measure: LengthMeasure = LengthMeasure.ARC

    @model_validator(mode="before")
    @classmethod
    def _default_evolve_layers(cls, data: object) -> object:
        if isinstance(data, dict) and data.get("evolve_layers") is None:
            paradigm = Paradigm(data.get("paradigm", Paradigm.EDA))
            data = {**data, "evolve_layers": DEFAULT_EVOLVE_LAYERS if paradigm is Paradigm.EDA else ()}
        return data

    @model_validator(mode="after")
    def _check_combination(self) -> "TrainConfig":
        if self.paradigm is not Paradigm.EDA and self.evolve_layers:
            raise IncompatibleOptionsError(
                f"Evolve layers {list(self.evolve_layers)} would be ignored by the `{self.paradigm}` paradigm."
            )
        if self.distinct and self.paradigm is not Paradigm.EDA:
            raise IncompatibleOptionsError(
                f"Distinct anchor selection is defined on evolving anchors; `{self.paradigm}` cannot use it."
            )
        if any(epoch < 1 for epoch in self.lr_decay_epochs):
            raise IncompatibleOptionsError("Learning-rate decay epochs are 1-based.")
        self.schedule()
        return self

    @property
    def use_distinct(self) -> bool:
        """Whether distinct-anchor selection is active, resolving the paradigm default."""
        return self.distinct if self.distinct is not None else self.paradigm is Paradigm.EDA

    @property
    def evolve_times(self) -> int:
        """Number of anchor updates."""
        return len(self.evolve_layers)

    @property
    def score_map(self) -> ScoreMap:
        """How score logits become confidences at evaluation time."""
        return ScoreMap.SIGMOID if self.cls_kind is ClsKind.BCE else ScoreMap.SOFTMAX

    def schedule(self) -> EvolveSchedule:
        """The evolve schedule over `num_layers` decoder layers."""
        return EvolveSchedule(self.num_layers, self.evolve_layers)

    def loss_config(self) -> LossConfig:
        """Loss weights and classification kind."""
        return LossConfig(lambda_reg=self.lambda_reg, lambda_cls=self.lambda_cls, cls_kind=self.cls_kind)

    def model_config_for(self, context_dim: int, horizon: int, dt: float, num_components: int) -> ModelConfig:
        """Model sizes for data with the given context, horizon and anchor count."""
        return ModelConfig(
            context_dim=context_dim,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            num_components=num_components,
            horizon=horizon,
            dt=dt,
            seed=self.seed,
        )

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during `epoch` (1-based)."""
        decays = sum(1 for boundary in self.lr_decay_epochs if boundary < epoch)
        return self.lr * self.lr_decay_factor**decays

    def metadata(self) -> dict[str, str]:
        """Flat description of the run, stored with the checkpoint."""
        return {
            "paradigm": str(self.paradigm),
            "evolve_layers": ",".join(str(layer) for layer in self.evolve_layers),
            "distinct": "on" if self.use_distinct else "off",
            "cls_kind": str(self.cls_kind),
            "score_map": str(self.score_map),
            "length_measure": str(self.length_measure),
            "epochs": str(self.epochs),
            "seed": str(self.seed),
        }


def match_layers(
    outputs: Sequence[MixtureOutput], scene: Scene, predefined: AnchorSet, cfg: TrainConfig
) -> list[MatchResult]:
    """Positive component and distinct mask of every decoder layer for one scene."""
    gt = scene.gt_trajectory
    match cfg.paradigm:
        case Paradigm.PREDICTION:
            return [match_prediction_based(output, gt) for output in outputs]
        case Paradigm.ANCHOR:
            return [match_anchor_based(predefined, gt) for _ in outputs]

    schedule = cfg.schedule()
    matches = []
    for output in outputs:
        anchors = anchors_for_layer(output.layer_index, predefined, outputs, schedule)
        if cfg.use_distinct:
            mask = select_distinct(anchors, output.score_logits, adaptive_threshold(output, cfg.length_measure))
        else:
            mask = np.ones(len(anchors), dtype=np.bool_)
        matches.append(match_eda(anchors, mask, gt))
        log.trace(
            f"Layer {output.layer_index}: {int(mask.sum())} distinct anchors, positive {matches[-1].positive_index}"
        )
    return matches


def match_batch(result: ForwardPass, gt: np.ndarray, cfg: TrainConfig) -> list[MatchBatch]:
    """
    `match_layers` for a whole batch at once; `gt` holds the ground-truth points, shape (B, T, 2).

    Predefined anchors are compared by endpoint and evolved anchors by their full
    trajectory, exactly as in the per-scene path.
    """
    everything = np.ones(result.anchor_endpoints.shape[:2], dtype=np.bool_)
    match cfg.paradigm:
        case Paradigm.PREDICTION:
            return [match_trajectories_batch(output.mu, everything, gt) for output in result.outputs]
        case Paradigm.ANCHOR:
            return [match_endpoints_batch(result.anchor_endpoints, everything, gt)] * len(result.outputs)

    schedule = cfg.schedule()
    matches = []
    for output in result.outputs:
        source = schedule.source_layer(output.layer_index)
        anchor_endpoints = result.anchor_endpoints if source is None else result.outputs[source - 1].endpoints
        if cfg.use_distinct:
            sigmas = adaptive_thresholds(output, cfg.length_measure)
            mask = greedy_nms_masks(anchor_endpoints, output.score_logits, sigmas)
        else:
            mask = everything
        if source is None:
            matches.append(match_endpoints_batch(anchor_endpoints, mask, gt))
        else:
            matches.append(match_trajectories_batch(result.outputs[source - 1].mu, mask, gt))
        log.trace(f"Layer {output.layer_index}: {mask.sum(axis=1).mean():.2f} distinct anchors per scene")
    return matches


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    """Scene-averaged loss of one epoch."""

    epoch: int
    total: float
    reg: float
    cls: float
    lr: float
    per_layer: tuple[tuple[float, float], ...]


@dataclasses.dataclass(frozen=True)
class TrainResult:
    """Trained parameters and the per-epoch loss history."""
    params: ModelParams
    history: tuple[EpochRecord, ...]


def train_model(
    scenes: Sequence[Scene],
    anchor_sets: Mapping[int, AnchorSet],
    cfg: TrainConfig,
    *,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """
    Train from seeded initial parameters.

    Scenes are shuffled every epoch by a generator seeded with `cfg.seed`; the
    loss is averaged over each mini-batch. With zero epochs the initial
    parameters are returned unchanged.
    """
    if not scenes:
        raise IncompatibleOptionsError("Training needs at least one scene.")
    missing = {scene.category for scene in scenes} - set(anchor_sets)
    if missing:
        raise IncompatibleOptionsError(f"No anchors for categories {sorted(missing)}.")
    sizes = {len(anchor_set) for anchor_set in anchor_sets.values()}
    if len(sizes) != 1:
        raise IncompatibleOptionsError(f"All categories need the same number of anchors, got {sorted(sizes)}.")

    first = scenes[0]
    model_cfg = cfg.model_config_for(
        first.context.shape[0], first.gt_trajectory.horizon, first.gt_trajectory.dt, sizes.pop()
    )
    params = init_model(model_cfg, anchor_sets)
    state = AdamState.zeros_like(params)
    loss_cfg = cfg.loss_config()
    rng = np.random.default_rng(cfg.seed)
    stopwatch = Stopwatch()

    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(scenes))
        totals = np.zeros(3)
        per_layer = np.zeros((model_cfg.num_layers, 2))

        for start in range(0, len(scenes), cfg.batch_size):
            batch = [scenes[i] for i in order[start:start + cfg.batch_size]]
            result = forward_pass(params, batch)
            gt = np.stack([scene.gt_trajectory.points for scene in batch])
            loss = mixture_loss_batch(result.outputs, match_batch(result, gt, cfg), gt, loss_cfg)

            totals += (loss.total.sum(), loss.reg.sum(), loss.cls.sum())
            per_layer += loss.per_layer.sum(axis=0)

            scale = 1.0 / len(batch)
            grads = backward_pass(params, result, [grad.scaled(scale) for grad in loss.grads])
            params, state = adam_step(params, grads, state, lr, weight_decay=cfg.weight_decay)

        totals /= len(scenes)
        per_layer /= len(scenes)
        record = EpochRecord(
            epoch, float(totals[0]), float(totals[1]), float(totals[2]), lr, tuple(map(tuple, per_layer.tolist()))
        )
        history.append(record)
        log.info(
            f"Epoch {epoch}/{cfg.epochs} [{stopwatch.humanize()}]: loss {record.total:.4f} "
            f"(reg {record.reg:.4f}, cls {record.cls:.4f}, lr {lr:.2e})"
        )
        layers = ", ".join(f"L{i + 1} ({reg:.3f}, {cls:.3f})" for i, (reg, cls) in enumerate(record.per_layer))
        log.debug(f"Per-layer (reg, cls): {layers}")
        if on_epoch is not None:
            on_epoch(record)

    return TrainResult(params, tuple(history))


def forward_in_batches(
    params: ModelParams, scenes: Sequence[Scene], batch_size: int = 256
) -> list[list[MixtureOutput]]:
    """Every layer's output for every scene, computed in batches."""
    outputs = []
    for start in range(0, len(scenes), batch_size):
        outputs.extend(forward_batch(params, scenes[start:start + batch_size]))
    return outputs
