import dataclasses
import functools
from collections.abc import Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike

from eda.utils.exceptions import ValidationError


def _frozen_array(value: ArrayLike, dtype: type = np.float64) -> np.ndarray:
    array = np.array(value, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


class ArrayEqualityMixin:
    """Field-by-field equality for dataclasses holding numpy arrays."""

    def __eq__(self, other: object) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        for field in dataclasses.fields(self):
            mine, theirs = getattr(self, field.name), getattr(other, field.name)
            if isinstance(mine, np.ndarray):
                if mine.shape != theirs.shape or not np.array_equal(mine, theirs):
                    return False
            elif mine != theirs:
                return False
        return True

    __hash__ = None


@dataclasses.dataclass(frozen=True, eq=False)
class Trajectory(ArrayEqualityMixin):
    """A fixed-horizon sequence of 2D waypoints sampled every `dt` seconds."""

    points: np.ndarray
    dt: float = 0.5

    def __post_init__(self):
        points = _frozen_array(self.points)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ValidationError("shape", f"trajectory points must have shape (T, 2), got {points.shape}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def horizon(self) -> int:
        """Number of waypoints T."""
        return self.points.shape[0]

    @property
    def endpoint(self) -> np.ndarray:
        """The final waypoint."""
        return self.points[-1]


@dataclasses.dataclass(frozen=True)
class GaussianBounds:
    """Parameter bounds keeping the bivariate Gaussian well conditioned."""

    log_sigma_min: float = -5.0
    log_sigma_max: float = 5.0
    rho_bound: float = 0.5


DEFAULT_BOUNDS = GaussianBounds()


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianTrajectory(ArrayEqualityMixin):
    """Per-step bivariate Gaussian parameters of one mixture component."""

    mu: np.ndarray
    log_sigma: np.ndarray
    rho_raw: np.ndarray
    dt: float = 0.5
    bounds: GaussianBounds = DEFAULT_BOUNDS

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen_array(self.mu))
        object.__setattr__(self, "log_sigma", _frozen_array(self.log_sigma))
        object.__setattr__(self, "rho_raw", _frozen_array(self.rho_raw))

    @property
    def horizon(self) -> int:
        """Number of steps."""
        return self.mu.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        """Standard deviations, `exp(log_sigma)`."""
        return np.exp(self.log_sigma)

    @property
    def rho(self) -> np.ndarray:
        """Correlation, strictly inside (-1, 1) by construction."""
        return self.bounds.rho_bound * np.tanh(self.rho_raw)

    def mean_trajectory(self) -> Trajectory:
        """The means as a plain trajectory."""
        return Trajectory(self.mu, self.dt)


@dataclasses.dataclass(frozen=True, eq=False)
class MixtureOutput(ArrayEqualityMixin):
    """
    One decoder layer's prediction: N_C Gaussian trajectories plus raw score logits.

    Parameters are stored stacked over components (`mu` has shape (N_C, T, 2))
    so that the model and the loss work on whole arrays; `components` gives the
    per-component view.
    """

    mu: np.ndarray
    log_sigma: np.ndarray
    rho_raw: np.ndarray
    score_logits: np.ndarray
    layer_index: int
    dt: float = 0.5
    bounds: GaussianBounds = DEFAULT_BOUNDS

    def __post_init__(self):
        for name in ("mu", "log_sigma", "rho_raw", "score_logits"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))

    @property
    def num_components(self) -> int:
        """Number of mixture components."""
        return self.score_logits.shape[0]

    @property
    def horizon(self) -> int:
        """Number of steps per component."""
        return self.mu.shape[1]

    def component(self, index: int) -> GaussianTrajectory:
        """Component `index` as a `GaussianTrajectory` sharing this output's bounds."""
        return GaussianTrajectory(
            self.mu[index], self.log_sigma[index], self.rho_raw[index], self.dt, self.bounds
        )

    @property
    def components(self) -> tuple[GaussianTrajectory, ...]:
        """Every component, in index order."""
        return tuple(self.component(i) for i in range(self.num_components))

    def mean_trajectory(self, index: int) -> Trajectory:
        """Mean of component `index` as a trajectory."""
        return Trajectory(self.mu[index], self.dt)

    @property
    def endpoints(self) -> np.ndarray:
        """Final mean point of every component, shape (N_C, 2)."""
        return self.mu[:, -1, :]


@dataclasses.dataclass(frozen=True, eq=False)
class Anchor(ArrayEqualityMixin):
    """
    A spatial prior tied to one mixture component.

    Predefined anchors (intention points) are bare endpoints; evolved anchors
    carry the full mean trajectory of the decoder layer they came from.
    """

    endpoint: np.ndarray
    full_trajectory: Trajectory | None = None
    evolved_from_layer: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "endpoint", _frozen_array(self.endpoint))

    @classmethod
    def predefined(cls, endpoint: Sequence[float]) -> "Anchor":
        """An anchor given only by its intention point."""
        return cls(np.asarray(endpoint, dtype=np.float64))

    @classmethod
    def evolved(cls, trajectory: Trajectory, layer_index: int) -> "Anchor":
        """An anchor taken from the mean trajectory of a decoder layer's output."""
        return cls(trajectory.endpoint.copy(), trajectory, layer_index)

    @property
    def is_predefined(self) -> bool:
        """Whether the anchor is an intention point rather than a layer prediction."""
        return self.evolved_from_layer is None

    @property
    def provenance(self) -> str:
        """`predefined` or `evolved-from-layer-<l>`."""
        if self.is_predefined:
            return "predefined"
        return f"evolved-from-layer-{self.evolved_from_layer}"


@dataclasses.dataclass(frozen=True, eq=False)
class AnchorSet(ArrayEqualityMixin):
    """N_C anchors, index-aligned with the components of a `MixtureOutput`."""

    anchors: tuple[Anchor, ...]
    category: int = 0

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(self.anchors))

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self) -> Iterator[Anchor]:
        return iter(self.anchors)

    def __getitem__(self, index: int) -> Anchor:
        return self.anchors[index]

    @classmethod
    def from_endpoints(cls, endpoints: ArrayLike, category: int = 0) -> "AnchorSet":
        """Build a predefined anchor set from an (N_C, 2) endpoint array."""
        return cls(tuple(Anchor.predefined(point) for point in np.asarray(endpoints, dtype=np.float64)), category)

    @classmethod
    def from_output(cls, output: MixtureOutput, category: int = 0) -> "AnchorSet":
        """Turn a layer's mean trajectories into evolved anchors."""
        return cls(
            tuple(Anchor.evolved(output.mean_trajectory(i), output.layer_index) for i in range(output.num_components)),
            category,
        )

    @property
    def endpoints(self) -> np.ndarray:
        """Endpoint of every anchor, shape (N_C, 2)."""
        return np.stack([anchor.endpoint for anchor in self.anchors])

    @property
    def is_predefined(self) -> bool:
        """Whether every anchor is an intention point."""
        return all(anchor.is_predefined for anchor in self.anchors)


@dataclasses.dataclass(frozen=True, eq=False)
class Scene(ArrayEqualityMixin):
    """
    A single prediction problem.

    `latent_mode` is kept for diagnostics only: nothing that feeds the model
    reads it.
    """

    context: np.ndarray
    gt_trajectory: Trajectory
    latent_mode: int
    category: int = 0

    def __post_init__(self):
        object.__setattr__(self, "context", _frozen_array(self.context))
        object.__setattr__(self, "latent_mode", int(self.latent_mode))
        object.__setattr__(self, "category", int(self.category))


@dataclasses.dataclass(frozen=True, eq=False)
class MatchResult(ArrayEqualityMixin):
    """Which component is positive, which are neutral, and the distances that decided it."""

    positive_index: int
    distinct_mask: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positive_index", int(self.positive_index))
        object.__setattr__(self, "distinct_mask", _frozen_array(self.distinct_mask, dtype=np.bool_))
        object.__setattr__(self, "distances", _frozen_array(self.distances))

    @property
    def neutral_indices(self) -> np.ndarray:
        """Indices of the components left out of the classification loss."""
        return np.flatnonzero(~self.distinct_mask)


@dataclasses.dataclass(frozen=True, eq=False)
class MixtureBatch(ArrayEqualityMixin):
    """
    One decoder layer's outputs for a batch of scenes, stacked along a leading batch axis.

    This is the training-side view of `MixtureOutput`: `mu` has shape (B, N_C, T, 2)
    and `score_logits` (B, N_C). The arrays are not copied.
    """

    mu: np.ndarray
    log_sigma: np.ndarray
    rho_raw: np.ndarray
    score_logits: np.ndarray
    layer_index: int
    dt: float = 0.5
    bounds: GaussianBounds = DEFAULT_BOUNDS

    def __len__(self) -> int:
        return self.score_logits.shape[0]

    @classmethod
    def stack(cls, outputs: Sequence[MixtureOutput]) -> "MixtureBatch":
        """Stack same-layer outputs of several scenes."""
        first = outputs[0]
        return cls(
            np.stack([output.mu for output in outputs]),
            np.stack([output.log_sigma for output in outputs]),
            np.stack([output.rho_raw for output in outputs]),
            np.stack([output.score_logits for output in outputs]),
            first.layer_index,
            first.dt,
            first.bounds,
        )

    @property
    def endpoints(self) -> np.ndarray:
        """Final mean point of every component, shape (B, N_C, 2)."""
        return self.mu[:, :, -1, :]

    def scene(self, index: int) -> MixtureOutput:
        """The output of scene `index`."""
        return MixtureOutput(
            self.mu[index],
            self.log_sigma[index],
            self.rho_raw[index],
            self.score_logits[index],
            self.layer_index,
            self.dt,
            self.bounds,
        )


@dataclasses.dataclass(frozen=True, eq=False)
class MatchBatch(ArrayEqualityMixin):
    """`MatchResult`s of a batch of scenes, stacked along a leading batch axis."""

    positive_index: np.ndarray
    distinct_mask: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return self.positive_index.shape[0]

    @classmethod
    def stack(cls, matches: Sequence[MatchResult]) -> "MatchBatch":
        """Stack the matches of several scenes."""
        return cls(
            np.array([match.positive_index for match in matches], dtype=np.intp),
            np.stack([match.distinct_mask for match in matches]),
            np.stack([match.distances for match in matches]),
        )

    def scene(self, index: int) -> MatchResult:
        """The match of scene `index`."""
        return MatchResult(self.positive_index[index], self.distinct_mask[index], self.distances[index])


@functools.singledispatch
def validate(value: object, **_) -> object:
    """
    Check every invariant of `value`, raising `ValidationError` naming the first one violated.

    Returns `value` unchanged so calls can be chained.
    """
    raise TypeError(f"No validation rule for {type(value).__name__}.")


def _require_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise ValidationError("non-finite", f"{what} contains NaN or infinite values")


@validate.register
def _(value: Trajectory, *, horizon: int | None = None, **_) -> Trajectory:
    if value.horizon < 1:
        raise ValidationError("horizon", "a trajectory needs at least one waypoint")
    if horizon is not None and value.horizon != horizon:
        raise ValidationError("dimension mismatch", f"horizon {value.horizon} != expected {horizon}")
    if not (np.isfinite(value.dt) and value.dt > 0):
        raise ValidationError("dt", f"timestep must be positive and finite, got {value.dt}")
    _require_finite(value.points, "trajectory")
    return value


def _validate_gaussian_arrays(
    mu: np.ndarray, log_sigma: np.ndarray, rho_raw: np.ndarray, bounds: GaussianBounds, what: str
) -> None:
    if log_sigma.shape != mu.shape or rho_raw.shape != mu.shape[:-1]:
        raise ValidationError(
            "dimension mismatch", f"{what}: mu {mu.shape}, log_sigma {log_sigma.shape}, rho_raw {rho_raw.shape}"
        )
    for name, array in (("mu", mu), ("log_sigma", log_sigma), ("rho_raw", rho_raw)):
        _require_finite(array, f"{what} {name}")
    if np.any(log_sigma < bounds.log_sigma_min) or np.any(log_sigma > bounds.log_sigma_max):
        raise ValidationError(
            "log_sigma bounds", f"{what}: values outside [{bounds.log_sigma_min}, {bounds.log_sigma_max}]"
        )
    if not 0 < bounds.rho_bound < 1:
        raise ValidationError("rho bound", f"rho_bound must lie in (0, 1), got {bounds.rho_bound}")


@validate.register
def _(value: GaussianTrajectory, *, horizon: int | None = None, **_) -> GaussianTrajectory:
    if value.mu.ndim != 2 or value.mu.shape[1] != 2:
        raise ValidationError("dimension mismatch", f"mu must have shape (T, 2), got {value.mu.shape}")
    if horizon is not None and value.horizon != horizon:
        raise ValidationError("dimension mismatch", f"horizon {value.horizon} != expected {horizon}")
    _validate_gaussian_arrays(value.mu, value.log_sigma, value.rho_raw, value.bounds, "component")
    return value


@validate.register
def _(value: MixtureOutput, *, horizon: int | None = None, num_components: int | None = None, **_) -> MixtureOutput:
    if value.mu.ndim != 3 or value.mu.shape[2] != 2:
        raise ValidationError("dimension mismatch", f"mu must have shape (N_C, T, 2), got {value.mu.shape}")
    n_c = value.num_components
    if n_c < 2:
        raise ValidationError("component count", f"a mixture needs at least 2 components, got {n_c}")
    if value.mu.shape[0] != n_c:
        raise ValidationError("dimension mismatch", f"{value.mu.shape[0]} trajectories for {n_c} score logits")
    if num_components is not None and n_c != num_components:
        raise ValidationError("dimension mismatch", f"{n_c} components != expected {num_components}")
    if horizon is not None and value.horizon != horizon:
        raise ValidationError("dimension mismatch", f"horizon {value.horizon} != expected {horizon}")
    _validate_gaussian_arrays(value.mu, value.log_sigma, value.rho_raw, value.bounds, "mixture output")
    _require_finite(value.score_logits, "score logits")
    return value


@validate.register
def _(value: Anchor, **_) -> Anchor:
    if value.endpoint.shape != (2,):
        raise ValidationError("dimension mismatch", f"anchor endpoint must have shape (2,), got {value.endpoint.shape}")
    _require_finite(value.endpoint, "anchor endpoint")
    if value.is_predefined:
        if value.full_trajectory is not None:
            raise ValidationError("provenance", "predefined anchors are endpoints only")
        return value

    if value.full_trajectory is None:
        raise ValidationError("provenance", "evolved anchors must carry their full trajectory")
    validate(value.full_trajectory)
    if not np.array_equal(value.full_trajectory.endpoint, value.endpoint):
        raise ValidationError("provenance", "evolved anchor endpoint differs from its trajectory's last point")
    return value


@validate.register
def _(value: AnchorSet, *, num_components: int | None = None, **_) -> AnchorSet:
    if num_components is not None and len(value) != num_components:
        raise ValidationError("dimension mismatch", f"{len(value)} anchors != expected {num_components}")
    for anchor in value:
        validate(anchor)
    return value


@validate.register
def _(
    value: Scene,
    *,
    context_dim: int | None = None,
    horizon: int | None = None,
    num_modes: int | None = None,
    **_,
) -> Scene:
    if value.context.ndim != 1:
        raise ValidationError("dimension mismatch", f"context must be a vector, got shape {value.context.shape}")
    if context_dim is not None and value.context.shape[0] != context_dim:
        raise ValidationError("dimension mismatch", f"context dimension {value.context.shape[0]} != {context_dim}")
    _require_finite(value.context, "scene context")
    validate(value.gt_trajectory, horizon=horizon)
    if value.latent_mode < 0 or (num_modes is not None and value.latent_mode >= num_modes):
        raise ValidationError("latent mode", f"latent_mode {value.latent_mode} outside [0, {num_modes})")
    return value


@validate.register
def _(value: MatchResult, **_) -> MatchResult:
    mask, distances = value.distinct_mask, value.distances
    if mask.shape != distances.shape or mask.ndim != 1:
        raise ValidationError("dimension mismatch", f"mask {mask.shape} vs distances {distances.shape}")
    if not 0 <= value.positive_index < mask.shape[0]:
        raise ValidationError("mask/positive inconsistency", f"positive index {value.positive_index} out of range")
    if not mask[value.positive_index]:
        raise ValidationError("mask/positive inconsistency", "the positive component is masked out")
    _require_finite(distances[mask], "distinct distances")
    if not np.all(np.isposinf(distances[~mask])):
        raise ValidationError("mask/positive inconsistency", "masked-out distances must be +inf")
    if distances[value.positive_index] > distances[mask].min():
        raise ValidationError("mask/positive inconsistency", "the positive component is not the closest distinct one")
    return value
