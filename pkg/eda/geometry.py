import dataclasses
import enum

import numpy as np
from numpy.typing import ArrayLike
from pydis_core.utils import logging

from eda.core import Anchor, MixtureBatch, MixtureOutput, Trajectory
from eda.utils.exceptions import EmptyInputError, ValidationError

log = logging.get_logger(__name__)

# Bounds and ramp of the length-adaptive suppression radius.
NMS_SIGMA_MIN = 2.5
NMS_SIGMA_MAX = 3.5
NMS_SIGMA_SLOPE = 1.5
NMS_LENGTH_LOW = 10.0
NMS_LENGTH_HIGH = 50.0


class LengthMeasure(enum.StrEnum):
    """How the length of the top-scored trajectory is measured for `nms_threshold`."""

    ARC = "arc"
    DISPLACEMENT = "displacement"


@dataclasses.dataclass(frozen=True)
class NmsKeepList:
    """Result of greedy NMS: kept indices in visiting order and who suppressed the rest."""

    kept: tuple[int, ...]
    suppressed_by: dict[int, int]

    def mask(self, size: int) -> np.ndarray:
        """Boolean mask of length `size`, true for kept indices."""
        mask = np.zeros(size, dtype=np.bool_)
        mask[list(self.kept)] = True
        return mask


def _final_point(value: Trajectory | Anchor | ArrayLike) -> np.ndarray:
    if isinstance(value, Trajectory | Anchor):
        return value.endpoint
    point = np.asarray(value, dtype=np.float64)
    return point[-1] if point.ndim == 2 else point


def endpoint_distance(a: Trajectory | Anchor | ArrayLike, b: Trajectory | Anchor | ArrayLike) -> float:
    """Euclidean distance between the final points of `a` and `b` (trajectories, anchors or bare points)."""
    return float(np.hypot(*(_final_point(a) - _final_point(b))))


def mean_pointwise_distance(a: Trajectory | ArrayLike, b: Trajectory | ArrayLike) -> float:
    """Mean over time of the Euclidean distance between `a` and `b` at each step."""
    a_points = a.points if isinstance(a, Trajectory) else np.asarray(a, dtype=np.float64)
    b_points = b.points if isinstance(b, Trajectory) else np.asarray(b, dtype=np.float64)
    if a_points.shape != b_points.shape:
        raise ValidationError("length mismatch", f"{a_points.shape} vs {b_points.shape}")
    return float(np.hypot(*(a_points - b_points).T).mean())


def trajectory_length(points: np.ndarray, measure: LengthMeasure = LengthMeasure.ARC) -> float:
    """Length of a trajectory starting at the origin: travelled arc length or straight-line displacement."""
    return float(trajectory_lengths(points, measure))


def nms_threshold(length: float) -> float:
    """
    Suppression radius scaled with the length of the most confident trajectory.

    The radius grows by 1.5 per 40 length units beyond length 10 and is clamped
    to [2.5, 3.5].
    """
    ramp = NMS_SIGMA_MIN + NMS_SIGMA_SLOPE * (length - NMS_LENGTH_LOW) / (NMS_LENGTH_HIGH - NMS_LENGTH_LOW)
    return min(NMS_SIGMA_MAX, max(NMS_SIGMA_MIN, ramp))


def score_order(scores: ArrayLike) -> np.ndarray:
    """Indices by descending score, ties broken by the lower index."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))


def greedy_nms(endpoints: ArrayLike, scores: ArrayLike, sigma: float) -> NmsKeepList:
    """
    Greedy non-maximum suppression over 2D endpoints.

    Indices are visited in descending score order. An index is kept when it lies
    farther than `sigma` from every endpoint kept so far; otherwise it is
    recorded as suppressed by the nearest kept endpoint (lowest index on ties).
    """
    points = np.asarray(endpoints, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    if points.shape[0] == 0:
        raise EmptyInputError("NMS needs at least one candidate.")
    if scores.shape != (points.shape[0],):
        raise ValidationError("dimension mismatch", f"{points.shape[0]} endpoints for {scores.shape} scores")
    if not sigma > 0:
        raise ValidationError("nms radius", f"sigma must be positive, got {sigma}")

    kept: list[int] = []
    suppressed_by: dict[int, int] = {}
    for index in score_order(scores):
        index = int(index)
        if kept:
            distances = np.hypot(*(points[kept] - points[index]).T)
            if distances.min() <= sigma:
                closest = distances.min()
                suppressed_by[index] = min(k for k, d in zip(kept, distances, strict=True) if d == closest)
                continue
        kept.append(index)

    log.trace(f"NMS kept {len(kept)} of {points.shape[0]} candidates at sigma={sigma:.3f}")
    return NmsKeepList(tuple(kept), suppressed_by)


def adaptive_threshold(output: MixtureOutput, measure: LengthMeasure = LengthMeasure.ARC) -> float:
    """`nms_threshold` of the length of the output's highest-scored mean trajectory."""
    top = int(score_order(output.score_logits)[0])
    return nms_threshold(trajectory_length(output.mu[top], measure))


def trajectory_lengths(points: np.ndarray, measure: LengthMeasure = LengthMeasure.ARC) -> np.ndarray:
    """`trajectory_length` over the leading axes of a (..., T, 2) array."""
    points = np.asarray(points, dtype=np.float64)
    if measure is LengthMeasure.DISPLACEMENT:
        return np.hypot(points[..., -1, 0], points[..., -1, 1])
    steps = np.diff(points, axis=-2, prepend=np.zeros_like(points[..., :1, :]))
    return np.hypot(steps[..., 0], steps[..., 1]).sum(axis=-1)


def adaptive_thresholds(batch: MixtureBatch, measure: LengthMeasure = LengthMeasure.ARC) -> np.ndarray:
    """`adaptive_threshold` of every scene in `batch`, shape (B,)."""
    # argmax returns the first maximum, the same component `score_order` puts first.
    top = np.argmax(batch.score_logits, axis=1)
    lengths = trajectory_lengths(batch.mu[np.arange(len(batch)), top], measure)
    ramp = NMS_SIGMA_MIN + NMS_SIGMA_SLOPE * (lengths - NMS_LENGTH_LOW) / (NMS_LENGTH_HIGH - NMS_LENGTH_LOW)
    return np.clip(ramp, NMS_SIGMA_MIN, NMS_SIGMA_MAX)


def greedy_nms_masks(endpoints: np.ndarray, scores: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """
    Kept-masks of `greedy_nms` for a batch of candidate sets.

    `endpoints` has shape (B, N, 2), `scores` (B, N) and `sigmas` (B,). The
    scenes advance through their score orders together, one rank per step.
    """
    endpoints = np.asarray(endpoints, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    batch, count = scores.shape
    if count == 0:
        raise EmptyInputError("NMS needs at least one candidate.")
    if endpoints.shape != (batch, count, 2) or sigmas.shape != (batch,):
        raise ValidationError(
            "dimension mismatch", f"endpoints {endpoints.shape}, scores {scores.shape}, sigmas {sigmas.shape}"
        )
    if not np.all(sigmas > 0):
        raise ValidationError("nms radius", "every sigma must be positive")

    offsets = endpoints[:, :, None, :] - endpoints[:, None, :, :]
    distances = np.hypot(offsets[..., 0], offsets[..., 1])
    # Stable sort of the negated scores: descending, lower index first on ties.
    order = np.argsort(-scores, axis=1, kind="stable")
    rows = np.arange(batch)
    kept = np.zeros((batch, count), dtype=np.bool_)
    for rank in range(count):
        index = order[:, rank]
        blocked = (kept & (distances[rows, index] <= sigmas[:, None])).any(axis=1)
        kept[rows, index] = ~blocked
    return kept
