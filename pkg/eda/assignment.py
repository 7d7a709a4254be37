import enum

import numpy as np
from numpy.typing import ArrayLike

from eda.core import Anchor, AnchorSet, MatchBatch, MatchResult, MixtureOutput, Trajectory
from eda.geometry import endpoint_distance, mean_pointwise_distance
from eda.utils.exceptions import ValidationError


class Paradigm(enum.StrEnum):
    """How positive components are chosen during training."""

    PREDICTION = "pred"
    ANCHOR = "anchor"
    EDA = "eda"


def anchor_distance(anchor: Anchor, gt: Trajectory) -> float:
    """
    Distance between an anchor and the ground truth.

    Predefined anchors are endpoints and compare by endpoint distance; evolved
    anchors compare over the full trajectory.
    """
    if anchor.is_predefined:
        return endpoint_distance(anchor.endpoint, gt.endpoint)
    if anchor.full_trajectory is None:
        raise ValidationError("provenance", "evolved anchors must carry their full trajectory")
    return mean_pointwise_distance(anchor.full_trajectory, gt)


def _masked_argmin(distances: np.ndarray, mask: np.ndarray) -> MatchResult:
    distances = np.where(mask, distances, np.inf)
    # np.argmin returns the first minimum, i.e. the lower index on ties.
    return MatchResult(int(np.argmin(distances)), mask, distances)


def match_prediction_based(output: MixtureOutput, gt: Trajectory) -> MatchResult:
    """The component whose mean trajectory is closest to the ground truth is positive."""
    distances = np.array([mean_pointwise_distance(output.mu[i], gt.points) for i in range(output.num_components)])
    return _masked_argmin(distances, np.ones(output.num_components, dtype=np.bool_))


def match_anchor_based(anchors: AnchorSet, gt: Trajectory) -> MatchResult:
    """The component whose predefined anchor endpoint is closest to the ground-truth endpoint is positive."""
    if not anchors.is_predefined:
        raise ValidationError("provenance", "anchor-based matching only accepts predefined anchors")
    distances = np.hypot(*(anchors.endpoints - gt.endpoint).T)
    return _masked_argmin(distances, np.ones(len(anchors), dtype=np.bool_))


def match_eda(anchors: AnchorSet, distinct_mask: ArrayLike, gt: Trajectory) -> MatchResult:
    """
    The distinct anchor closest to the ground truth marks the positive component.

    Components whose anchors were not selected as distinct get an infinite
    distance and can be neither positive nor negative.
    """
    mask = np.asarray(distinct_mask, dtype=np.bool_)
    if mask.shape != (len(anchors),):
        raise ValidationError("dimension mismatch", f"{len(anchors)} anchors for a mask of shape {mask.shape}")
    if not mask.any():
        raise ValidationError("mask/positive inconsistency", "the distinct mask selects no anchor")

    distances = np.array([anchor_distance(anchor, gt) for anchor in anchors])
    return _masked_argmin(distances, mask)


def _masked_argmin_batch(distances: np.ndarray, mask: np.ndarray) -> MatchBatch:
    if mask.shape != distances.shape:
        raise ValidationError("dimension mismatch", f"{distances.shape} distances for a mask of shape {mask.shape}")
    if not mask.any(axis=1).all():
        raise ValidationError("mask/positive inconsistency", "a distinct mask selects no anchor")
    distances = np.where(mask, distances, np.inf)
    return MatchBatch(np.argmin(distances, axis=1), mask, distances)


def match_endpoints_batch(endpoints: np.ndarray, distinct_mask: np.ndarray, gt: np.ndarray) -> MatchBatch:
    """
    Batched matching against endpoint-only anchors.

    `endpoints` has shape (B, N_C, 2) and `gt` (B, T, 2); an all-true mask is
    anchor-based matching, any other mask is the predefined-anchor layers of EDA.
    """
    offsets = endpoints - gt[:, None, -1, :]
    return _masked_argmin_batch(np.hypot(offsets[..., 0], offsets[..., 1]), np.asarray(distinct_mask, np.bool_))


def match_trajectories_batch(trajectories: np.ndarray, distinct_mask: np.ndarray, gt: np.ndarray) -> MatchBatch:
    """
    Batched matching against full trajectories by mean pointwise distance.

    With the layer's own means and an all-true mask this is prediction-based
    matching; with an earlier layer's means it is the evolved layers of EDA.
    """
    offsets = trajectories - gt[:, None, :, :]
    distances = np.hypot(offsets[..., 0], offsets[..., 1]).mean(axis=-1)
    return _masked_argmin_batch(distances, np.asarray(distinct_mask, np.bool_))
