import collections
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydis_core.utils import logging

from eda.constants import MANEUVER_NAMES
from eda.core import Scene, Trajectory
from eda.utils.parallel import ordered_map

log = logging.get_logger(__name__)

# (yaw rate in rad/s, acceleration in length-units/s^2) per default maneuver, in MANEUVER_NAMES order.
DEFAULT_MANEUVERS = (
    (0.25, -0.5),
    (0.1, 0.0),
    (0.0, -1.0),
    (0.0, 0.0),
    (-0.1, 0.0),
    (-0.25, -0.5),
)


class GenConfig(BaseModel):
    """Everything that determines a synthetic dataset."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_scenes: int = Field(default=10_000, ge=0)
    num_modes: int = Field(default=6, ge=2)
    mode_prior_sharpness: float = Field(default=2.0, gt=0)
    noise_sigma: float = Field(default=0.2, ge=0)
    horizon: int = Field(default=16, gt=0)
    dt: float = Field(default=0.5, gt=0)
    seed: int = 0
    speed_min: float = Field(default=4.0, ge=0)
    speed_max: float = Field(default=12.0, ge=0)
    # Speeds are divided by this before entering the context vector.
    speed_scale: float = Field(default=10.0, gt=0)
    # None selects the default maneuvers for six modes, or evenly spread turn rates otherwise.
    yaw_rates: tuple[float, ...] | None = None
    accelerations: tuple[float, ...] | None = None
    # One entry per category tag; scales the initial speed of that category's scenes.
    category_speed_factors: tuple[float, ...] = (1.0,)

    @model_validator(mode="after")
    def _check_tables(self) -> "GenConfig":
        if self.speed_max < self.speed_min:
            raise ValueError("speed_max must not be below speed_min")
        for name in ("yaw_rates", "accelerations"):
            table = getattr(self, name)
            if table is not None and len(table) != self.num_modes:
                raise ValueError(f"{name} needs one entry per mode ({self.num_modes}), got {len(table)}")
        if not self.category_speed_factors or any(f <= 0 for f in self.category_speed_factors):
            raise ValueError("category_speed_factors needs at least one positive entry")
        return self

    @property
    def context_dim(self) -> int:
        """Length of the context vector: the mode prior plus the speed."""
        return self.num_modes + 1

    @property
    def num_categories(self) -> int:
        """Number of category tags."""
        return len(self.category_speed_factors)

    def maneuvers(self) -> tuple[np.ndarray, np.ndarray]:
        """Yaw rate and acceleration of every maneuver."""
        if self.num_modes == len(DEFAULT_MANEUVERS):
            default_yaw, default_accel = (np.array(column) for column in zip(*DEFAULT_MANEUVERS, strict=True))
        else:
            default_yaw, default_accel = np.linspace(0.25, -0.25, self.num_modes), np.zeros(self.num_modes)
        yaw = np.array(self.yaw_rates) if self.yaw_rates is not None else default_yaw
        accel = np.array(self.accelerations) if self.accelerations is not None else default_accel
        return yaw, accel

    def mode_names(self) -> tuple[str, ...]:
        """Display names of the maneuvers."""
        if self.num_modes == len(MANEUVER_NAMES):
            return MANEUVER_NAMES
        return tuple(f"mode-{i}" for i in range(self.num_modes))


def rollout(speed: float, yaw_rate: float, acceleration: float, horizon: int, dt: float) -> np.ndarray:
    """
    Noise-free constant-turn-rate rollout from the origin, heading along +x.

    Speed changes by `acceleration` every second and never drops below zero.
    Returns the waypoints after each of the `horizon` steps.
    """
    steps = np.arange(1, horizon + 1)
    speeds = np.maximum(0.0, speed + acceleration * steps * dt)
    headings = yaw_rate * (steps - 1) * dt
    displacement = np.stack([np.cos(headings), np.sin(headings)], axis=1) * (speeds * dt)[:, None]
    return np.cumsum(displacement, axis=0)


def scene_rng(cfg: GenConfig, index: int) -> np.random.Generator:
    """Independent generator of one scene, derived from the dataset seed and the scene index."""
    return np.random.default_rng([cfg.seed, index])


def draw_observables(rng: np.random.Generator, cfg: GenConfig) -> tuple[int, np.ndarray, float]:
    """Draw the category, the sharpened mode prior and the initial speed of a scene."""
    category = int(rng.integers(cfg.num_categories))
    weights = rng.dirichlet(np.ones(cfg.num_modes)) ** cfg.mode_prior_sharpness
    prior = weights / weights.sum()
    speed = rng.uniform(cfg.speed_min, cfg.speed_max) * cfg.category_speed_factors[category]
    return category, prior, float(speed)


def encode_context(prior: np.ndarray, speed: float, cfg: GenConfig) -> np.ndarray:
    """The model-visible context: the mode prior followed by the normalised speed."""
    return np.concatenate([prior, [speed / cfg.speed_scale]])


def generate_scene(cfg: GenConfig, index: int) -> Scene:
    """Scene `index` of the dataset described by `cfg`."""
    rng = scene_rng(cfg, index)
    category, prior, speed = draw_observables(rng, cfg)
    mode = int(rng.choice(cfg.num_modes, p=prior))

    yaw, accel = cfg.maneuvers()
    points = rollout(speed, yaw[mode], accel[mode], cfg.horizon, cfg.dt)
    if cfg.noise_sigma:
        points = points + rng.normal(0.0, cfg.noise_sigma, size=points.shape)

    return Scene(encode_context(prior, speed, cfg), Trajectory(points, cfg.dt), mode, category)


def generate_dataset(cfg: GenConfig) -> list[Scene]:
    """All `cfg.num_scenes` scenes; identical for identical configs whatever the thread count."""
    scenes = ordered_map(lambda index: generate_scene(cfg, index), range(cfg.num_scenes))
    log.debug(f"Generated {len(scenes)} scenes with {cfg.num_modes} modes.")
    return scenes


def mode_histogram(scenes: Sequence[Scene], cfg: GenConfig) -> dict[str, int]:
    """Number of scenes per maneuver name."""
    counts = collections.Counter(scene.latent_mode for scene in scenes)
    return {name: counts.get(mode, 0) for mode, name in enumerate(cfg.mode_names())}
