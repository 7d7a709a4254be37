import collections
import dataclasses
import enum
import itertools
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike
from pydis_core.utils import logging

from eda.core import MixtureOutput, Scene, Trajectory
from eda.geometry import LengthMeasure, greedy_nms, nms_threshold, score_order, trajectory_length
from eda.utils.exceptions import EmptyInputError, ValidationError

log = logging.get_logger(__name__)

DEFAULT_K = 6
DEFAULT_MISS_THRESHOLD = 2.0


class ScoreMode(enum.StrEnum):
    """How per-scene scores are transformed before predictions are pooled across scenes."""

    ORIGINAL = "original"
    SCALED = "scaled"
    RANK = "rank"


class ScoreMap(enum.StrEnum):
    """How raw score logits become confidences."""

    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


def score_probabilities(logits: ArrayLike, score_map: ScoreMap = ScoreMap.SIGMOID) -> np.ndarray:
    """Map raw score logits to confidences in [0, 1]."""
    logits = np.asarray(logits, dtype=np.float64)
    if score_map is ScoreMap.SOFTMAX:
        shifted = np.exp(logits - logits.max())
        return shifted / shifted.sum()
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


@dataclasses.dataclass(frozen=True, eq=False)
class SelectedPredictions:
    """K mean trajectories of one scene with their confidences, best first."""

    trajectories: np.ndarray
    scores: np.ndarray
    component_indices: tuple[int, ...]
    sigma: float
    dt: float = 0.5

    @property
    def k(self) -> int:
        """Number of selected predictions."""
        return self.scores.shape[0]

    @property
    def endpoints(self) -> np.ndarray:
        """Final point of every selected prediction."""
        return self.trajectories[:, -1, :]

    def trajectory(self, rank: int) -> Trajectory:
        """Selected prediction `rank` (0 is the best scored) as a trajectory."""
        return Trajectory(self.trajectories[rank], self.dt)


def select_top_k(
    output: MixtureOutput,
    k: int = DEFAULT_K,
    *,
    score_map: ScoreMap = ScoreMap.SIGMOID,
    measure: LengthMeasure = LengthMeasure.ARC,
) -> SelectedPredictions:
    """
    Keep the K best components that survive endpoint NMS.

    The radius comes from the length of the top-scored mean trajectory. When
    fewer than K survive, the highest-scored suppressed components fill the
    remaining slots; the result is always ordered by descending score.
    """
    if k < 1:
        raise ValidationError("top-k", f"K must be at least 1, got {k}")
    if k > output.num_components:
        raise ValidationError("top-k", f"K={k} exceeds the {output.num_components} components")

    order = score_order(output.score_logits)
    sigma = nms_threshold(trajectory_length(output.mu[order[0]], measure))
    keep = greedy_nms(output.endpoints, output.score_logits, sigma)

    chosen = list(keep.kept[:k])
    if len(chosen) < k:
        chosen_set = set(chosen)
        backfill = [int(i) for i in order if int(i) not in chosen_set]
        chosen.extend(backfill[: k - len(chosen)])
        log.trace(f"Back-filled {k - len(keep.kept)} suppressed components")

    rank_of = {int(index): rank for rank, index in enumerate(order)}
    chosen.sort(key=rank_of.__getitem__)
    probabilities = score_probabilities(output.score_logits, score_map)
    return SelectedPredictions(
        trajectories=output.mu[chosen].copy(),
        scores=probabilities[chosen],
        component_indices=tuple(chosen),
        sigma=sigma,
        dt=output.dt,
    )


def score_transform(scores: ArrayLike, mode: ScoreMode) -> np.ndarray:
    """
    Transform descending per-scene scores.

    `scaled` divides by their sum; `rank` adds K minus the 1-based rank, so that
    pooled sorting puts every scene's first prediction before any second one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    match mode:
        case ScoreMode.ORIGINAL:
            return scores.copy()
        case ScoreMode.SCALED:
            total = scores.sum()
            if not total > 0:
                raise ValidationError("zero score sum", "scaled scores need a positive sum")
            return scores / total
        case ScoreMode.RANK:
            return scores + np.arange(scores.shape[0] - 1, -1, -1, dtype=np.float64)
    raise ValueError(f"Unknown score mode {mode!r}")


def _displacements(trajectories: np.ndarray, gt: Trajectory) -> np.ndarray:
    """Per-candidate, per-step Euclidean error, shape (K, T)."""
    if trajectories.shape[1:] != gt.points.shape:
        raise ValidationError(
            "length mismatch", f"predictions {trajectories.shape[1:]} vs ground truth {gt.points.shape}"
        )
    difference = trajectories - gt.points[None]
    return np.hypot(difference[..., 0], difference[..., 1])


def final_errors(selected: SelectedPredictions, gt: Trajectory) -> np.ndarray:
    """Endpoint error of every selected prediction, in rank order."""
    return _displacements(selected.trajectories, gt)[:, -1]


def min_ade(selected: SelectedPredictions, gt: Trajectory) -> float:
    """Smallest average displacement error over the selected predictions."""
    return float(_displacements(selected.trajectories, gt).mean(axis=1).min())


def min_fde(selected: SelectedPredictions, gt: Trajectory) -> float:
    """Smallest final displacement error over the selected predictions."""
    return float(final_errors(selected, gt).min())


def is_miss(selected: SelectedPredictions, gt: Trajectory, miss_threshold: float = DEFAULT_MISS_THRESHOLD) -> bool:
    """Whether no selected prediction ends within `miss_threshold` of the ground truth."""
    return min_fde(selected, gt) > miss_threshold


def miss_rate(
    selections: Sequence[SelectedPredictions],
    gts: Sequence[Trajectory],
    miss_threshold: float = DEFAULT_MISS_THRESHOLD,
) -> float:
    """Fraction of scenes without any prediction ending within `miss_threshold` of the ground truth."""
    if not selections:
        raise EmptyInputError("Miss rate needs at least one scene.")
    misses = [is_miss(selected, gt, miss_threshold) for selected, gt in zip(selections, gts, strict=True)]
    return float(np.mean(misses))


def endpoint_spread(selected: SelectedPredictions) -> float:
    """Mean pairwise endpoint distance of the selection; small values mean clustered predictions."""
    if selected.k < 2:
        return 0.0
    pairs = list(itertools.combinations(range(selected.k), 2))
    first, second = (list(column) for column in zip(*pairs, strict=True))
    gaps = selected.endpoints[first] - selected.endpoints[second]
    return float(np.hypot(gaps[:, 0], gaps[:, 1]).mean())


def average_precision(
    scenes: Sequence[tuple[SelectedPredictions, ArrayLike, Trajectory]],
    miss_threshold: float = DEFAULT_MISS_THRESHOLD,
) -> float:
    """
    Interpolated average precision over the pooled predictions of all scenes.

    Within a scene only the highest-scored prediction ending within
    `miss_threshold` is a true positive. Pooled predictions are swept by
    descending transformed score (ties by scene order, then rank), recall is
    counted against the number of scenes, and the precision envelope is
    integrated over recall.
    """
    if not scenes:
        raise EmptyInputError("Average precision needs at least one scene.")

    pooled = []
    for scene_index, (selected, transformed, gt) in enumerate(scenes):
        transformed = np.asarray(transformed, dtype=np.float64)
        hits = np.flatnonzero(final_errors(selected, gt) <= miss_threshold)
        true_positive = int(hits[score_order(transformed[hits])[0]]) if hits.size else None
        pooled.extend(
            (-float(score), scene_index, rank, rank == true_positive) for rank, score in enumerate(transformed)
        )
    pooled.sort(key=lambda entry: entry[:3])

    is_tp = np.array([entry[3] for entry in pooled], dtype=np.float64)
    true_positives = np.cumsum(is_tp)
    precision = true_positives / np.arange(1, len(pooled) + 1)
    recall = true_positives / len(scenes)

    recall = np.concatenate([[0.0], recall, [1.0]])
    precision = np.concatenate([[0.0], precision, [0.0]])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * envelope[steps + 1]))


@dataclasses.dataclass(frozen=True)
class SceneDetail:
    """Metrics of one evaluated scene."""
    scene_index: int
    category: int
    min_ade: float
    min_fde: float
    miss: bool
    endpoint_spread: float


@dataclasses.dataclass(frozen=True)
class CategoryMetrics:
    """Metrics averaged over the scenes of one category."""
    category: int
    num_scenes: int
    min_ade: float
    min_fde: float
    miss_rate: float


@dataclasses.dataclass(frozen=True)
class MetricsBundle:
    """Dataset-level metrics plus the per-scene rows they were averaged from."""

    min_ade: float
    min_fde: float
    miss_rate: float
    map_original: float
    map_scaled: float
    map_rank: float
    endpoint_spread: float
    details: tuple[SceneDetail, ...]

    def map_for(self, mode: ScoreMode) -> float:
        """mAP under the given score transform."""
        return {
            ScoreMode.ORIGINAL: self.map_original,
            ScoreMode.SCALED: self.map_scaled,
            ScoreMode.RANK: self.map_rank,
        }[mode]

    def by_category(self) -> dict[int, CategoryMetrics]:
        """Per-category averages of the scene details."""
        groups: dict[int, list[SceneDetail]] = collections.defaultdict(list)
        for detail in self.details:
            groups[detail.category].append(detail)
        return {
            category: CategoryMetrics(
                category,
                len(rows),
                float(np.mean([row.min_ade for row in rows])),
                float(np.mean([row.min_fde for row in rows])),
                float(np.mean([row.miss for row in rows])),
            )
            for category, rows in sorted(groups.items())
        }


def evaluate(
    outputs: Sequence[MixtureOutput],
    scenes: Sequence[Scene],
    k: int = DEFAULT_K,
    *,
    miss_threshold: float = DEFAULT_MISS_THRESHOLD,
    score_map: ScoreMap = ScoreMap.SIGMOID,
    measure: LengthMeasure = LengthMeasure.ARC,
) -> MetricsBundle:
    """Metrics of the final-layer `outputs`, index-aligned with `scenes`; `measure` sizes the NMS radius."""
    if not scenes:
        raise EmptyInputError("Evaluation needs at least one scene.")

    selections = [select_top_k(output, k, score_map=score_map, measure=measure) for output in outputs]
    gts = [scene.gt_trajectory for scene in scenes]
    details = tuple(
        SceneDetail(
            index,
            scene.category,
            min_ade(selected, scene.gt_trajectory),
            min_fde(selected, scene.gt_trajectory),
            is_miss(selected, scene.gt_trajectory, miss_threshold),
            endpoint_spread(selected),
        )
        for index, (selected, scene) in enumerate(zip(selections, scenes, strict=True))
    )

    def map_under(mode: ScoreMode) -> float:
        entries = [
            (selected, score_transform(selected.scores, mode), gt) for selected, gt in zip(selections, gts, strict=True)
        ]
        return average_precision(entries, miss_threshold)

    return MetricsBundle(
        min_ade=float(np.mean([detail.min_ade for detail in details])),
        min_fde=float(np.mean([detail.min_fde for detail in details])),
        miss_rate=miss_rate(selections, gts, miss_threshold),
        map_original=map_under(ScoreMode.ORIGINAL),
        map_scaled=map_under(ScoreMode.SCALED),
        map_rank=map_under(ScoreMode.RANK),
        endpoint_spread=float(np.mean([detail.endpoint_spread for detail in details])),
        details=details,
    )


@dataclasses.dataclass(frozen=True)
class LayerMetrics:
    """minADE, minFDE and miss rate of one decoder layer over all of its components."""
    layer: int
    min_ade: float
    min_fde: float
    miss_rate: float


def per_layer_metrics(
    per_scene_outputs: Sequence[Sequence[MixtureOutput]],
    scenes: Sequence[Scene],
    miss_threshold: float = DEFAULT_MISS_THRESHOLD,
) -> list[LayerMetrics]:
    """
    minADE, minFDE and miss rate of every decoder layer over all of its components.

    No NMS is applied, so the numbers show how close the best component of
    each layer gets, independent of scoring.
    """
    if not scenes:
        raise EmptyInputError("Per-layer metrics need at least one scene.")

    num_layers = len(per_scene_outputs[0])
    rows = []
    for layer in range(num_layers):
        ade, fde = [], []
        for outputs, scene in zip(per_scene_outputs, scenes, strict=True):
            errors = _displacements(outputs[layer].mu, scene.gt_trajectory)
            ade.append(errors.mean(axis=1).min())
            fde.append(errors[:, -1].min())
        fde_array = np.array(fde)
        rows.append(
            LayerMetrics(
                layer + 1, float(np.mean(ade)), float(fde_array.mean()), float(np.mean(fde_array > miss_threshold))
            )
        )
    return rows


@dataclasses.dataclass(frozen=True)
class MetricsRow:
    """One configuration's line in metrics.csv."""

    config_id: str
    evolve_times: int
    distinct: bool
    cls_kind: str
    score_mode: str
    min_ade: float
    min_fde: float
    miss_rate: float
    map: float
    endpoint_spread: float

    @classmethod
    def from_bundle(
        cls,
        config_id: str,
        evolve_times: int,
        distinct: bool,
        cls_kind: str,
        score_mode: ScoreMode,
        bundle: MetricsBundle,
    ) -> "MetricsRow":
        """A row for `config_id` holding the bundle's metrics, with mAP under `score_mode`."""
        return cls(
            config_id,
            evolve_times,
            distinct,
            cls_kind,
            str(score_mode),
            bundle.min_ade,
            bundle.min_fde,
            bundle.miss_rate,
            bundle.map_for(score_mode),
            bundle.endpoint_spread,
        )
