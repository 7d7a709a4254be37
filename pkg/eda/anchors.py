import dataclasses
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike
from pydis_core.utils import logging

from eda.core import AnchorSet, MixtureOutput
from eda.geometry import greedy_nms
from eda.utils.exceptions import IncompatibleOptionsError, ValidationError

log = logging.get_logger(__name__)


@dataclasses.dataclass(frozen=True)
class EvolveSchedule:
    """
    After which decoder layers (1-based) the layer outputs replace the anchors.

    An empty schedule is the static anchor-based baseline.
    """

    num_layers: int
    evolve_after_layers: tuple[int, ...] = ()

    def __post_init__(self):
        layers = tuple(int(layer) for layer in self.evolve_after_layers)
        object.__setattr__(self, "evolve_after_layers", layers)

        if self.num_layers < 1:
            raise IncompatibleOptionsError(f"A decoder needs at least one layer, got {self.num_layers}.")
        if any(b <= a for a, b in zip(layers, layers[1:], strict=False)):
            raise IncompatibleOptionsError(f"Evolve layers must be strictly increasing, got {list(layers)}.")
        if layers and layers[0] < 1:
            raise IncompatibleOptionsError(f"Evolve layers are 1-based, got {list(layers)}.")
        if layers and layers[-1] >= self.num_layers:
            raise IncompatibleOptionsError(
                f"Cannot evolve after layer {layers[-1]} of a {self.num_layers}-layer decoder: "
                "no later layer would use the evolved anchors."
            )

    @classmethod
    def parse(cls, text: str, num_layers: int) -> "EvolveSchedule":
        """Parse a comma separated list such as `"2,4"`; the empty string means no evolution."""
        parts = [part.strip() for part in text.split(",") if part.strip()]
        try:
            layers = tuple(int(part) for part in parts)
        except ValueError:
            raise IncompatibleOptionsError(f"Evolve layers must be integers, got {text!r}.") from None
        return cls(num_layers, layers)

    @property
    def evolve_times(self) -> int:
        """Number of anchor updates in the schedule."""
        return len(self.evolve_after_layers)

    def source_layer(self, layer_index: int) -> int | None:
        """The layer whose output serves as anchors for `layer_index`, or None for the predefined anchors."""
        earlier = [layer for layer in self.evolve_after_layers if layer < layer_index]
        return earlier[-1] if earlier else None

    def __str__(self) -> str:
        return ",".join(str(layer) for layer in self.evolve_after_layers)


def schedule_for_evolve_times(evolve_times: int, num_layers: int) -> EvolveSchedule:
    """
    Spread `evolve_times` anchor updates evenly over a decoder.

    On six layers this gives no update, layer 3, layers 2 and 4, and every
    layer but the last for 0, 1, 2 and 5 updates.
    """
    if not 0 <= evolve_times < num_layers:
        raise IncompatibleOptionsError(
            f"A {num_layers}-layer decoder supports 0 to {num_layers - 1} anchor updates, got {evolve_times}."
        )
    # Half-up rounding; Python's round() would send 1.5 to 2 and 2.5 to 2.
    layers = tuple(int(np.floor(i * num_layers / (evolve_times + 1) + 0.5)) for i in range(1, evolve_times + 1))
    return EvolveSchedule(num_layers, layers)


@dataclasses.dataclass(frozen=True)
class KMeansResult:
    """Converged centroids, the final assignment and the objective after every iteration."""

    centroids: np.ndarray
    assignment: np.ndarray
    objective: float
    objective_history: tuple[float, ...]
    iterations: int
    converged: bool


def kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Pick `k` initial centroids among `points`, each with probability proportional to its squared distance."""
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(points.shape[0])]

    for i in range(1, k):
        dist_sq = np.min(((points[:, None, :] - centroids[None, :i, :]) ** 2).sum(axis=2), axis=1)
        total = dist_sq.sum()
        if total == 0:
            # Every point already sits on a centroid; fall back to uniform choice.
            centroids[i] = points[rng.integers(points.shape[0])]
            continue
        centroids[i] = points[rng.choice(points.shape[0], p=dist_sq / total)]

    return centroids


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist_sq = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignment = np.argmin(dist_sq, axis=1)
    return assignment, dist_sq[np.arange(points.shape[0]), assignment]


def kmeans_endpoints(
    gt_endpoints: ArrayLike,
    k: int,
    seed: int,
    max_iters: int = 300,
    *,
    initial_centroids: ArrayLike | None = None,
) -> KMeansResult:
    """
    Lloyd's algorithm with k-means++ initialisation over 2D endpoints.

    Iterates until the assignment no longer changes or `max_iters` is reached.
    A cluster that loses all its points is re-seeded at the point currently
    farthest from its own centroid.
    """
    points = np.asarray(gt_endpoints, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ValidationError("cluster count", f"k must be at least 1, got {k}")
    distinct = np.unique(points, axis=0).shape[0]
    if distinct < k:
        raise ValidationError("cluster count", f"{distinct} distinct points cannot form {k} clusters")

    if initial_centroids is None:
        centroids = kmeans_plusplus_init(points, k, np.random.default_rng(seed))
    else:
        centroids = np.array(initial_centroids, dtype=np.float64).reshape(k, 2)

    assignment, dist_sq = _assign(points, centroids)
    history = [float(dist_sq.sum())]
    converged = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        counts = np.bincount(assignment, minlength=k)
        for cluster in range(k):
            if counts[cluster]:
                centroids[cluster] = points[assignment == cluster].mean(axis=0)

        empty = np.flatnonzero(counts == 0)
        if empty.size:
            residual = ((points - centroids[assignment]) ** 2).sum(axis=1)
            for cluster in empty:
                farthest = int(np.argmax(residual))
                log.debug(f"Re-seeding empty cluster {cluster} at point {farthest}.")
                centroids[cluster] = points[farthest]
                residual[farthest] = -1.0

        new_assignment, dist_sq = _assign(points, centroids)
        history.append(float(dist_sq.sum()))
        if np.array_equal(new_assignment, assignment) and not empty.size:
            converged = True
            break
        assignment = new_assignment

    log.debug(f"k-means with k={k} finished after {iterations} iterations, objective {history[-1]:.6g}.")
    return KMeansResult(
        centroids=centroids,
        assignment=assignment,
        objective=history[-1],
        objective_history=tuple(history),
        iterations=iterations,
        converged=converged,
    )


def fit_anchor_sets(
    endpoints: np.ndarray, categories: Sequence[int], k: int, seed: int, max_iters: int = 300
) -> dict[int, tuple[AnchorSet, KMeansResult]]:
    """Fit one predefined anchor set per category tag."""
    categories = np.asarray(categories)
    fitted = {}
    for category in sorted(set(categories.tolist())):
        result = kmeans_endpoints(endpoints[categories == category], k, seed, max_iters)
        fitted[category] = (AnchorSet.from_endpoints(result.centroids, category), result)
    return fitted


def anchors_for_layer(
    layer_index: int,
    predefined: AnchorSet,
    layer_outputs: Sequence[MixtureOutput],
    schedule: EvolveSchedule,
) -> AnchorSet:
    """
    Anchors used to assign labels at `layer_index` (1-based).

    Layers before the first scheduled update use the predefined anchors; later
    layers use the mean trajectories of the most recent scheduled layer.
    """
    source = schedule.source_layer(layer_index)
    if source is None:
        return predefined
    if len(layer_outputs) < source:
        raise ValidationError("missing layer output", f"layer {layer_index} needs the output of layer {source}")
    return AnchorSet.from_output(layer_outputs[source - 1], predefined.category)


def select_distinct(anchors: AnchorSet, scores: ArrayLike, sigma: float) -> np.ndarray:
    """Mask of the anchors kept by greedy NMS over anchor endpoints, ordered by the layer's scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(anchors),):
        raise ValidationError("dimension mismatch", f"{len(anchors)} anchors for {scores.shape} scores")
    return greedy_nms(anchors.endpoints, scores, sigma).mask(len(anchors))
