from __future__ import annotations

import logging
from collections.abc import Callable

import numpy as np

from eda.core import DEFAULT_BOUNDS, AnchorSet, MixtureOutput, Scene, Trajectory
from eda.model import ModelConfig, ModelParams, init_model

for logger in logging.Logger.manager.loggerDict.values():
    # Set all loggers to CRITICAL by default to prevent screen clutter during testing

    if not isinstance(logger, logging.Logger):
        # There might be some logging.PlaceHolder objects in there
        continue

    logger.setLevel(logging.CRITICAL)


def random_trajectory(rng: np.random.Generator, horizon: int = 8, scale: float = 5.0, dt: float = 0.5) -> Trajectory:
    """A random walk starting near the origin."""
    return Trajectory(np.cumsum(rng.normal(0.0, scale / np.sqrt(horizon), size=(horizon, 2)), axis=0), dt)


def random_output(
    rng: np.random.Generator,
    num_components: int = 4,
    horizon: int = 8,
    *,
    layer_index: int = 1,
    scale: float = 5.0,
) -> MixtureOutput:
    """A mixture output with random means, in-bounds log-sigmas, correlations and logits."""
    mu = np.cumsum(rng.normal(0.0, scale / np.sqrt(horizon), size=(num_components, horizon, 2)), axis=1)
    return MixtureOutput(
        mu=mu,
        log_sigma=rng.uniform(-1.0, 1.0, size=(num_components, horizon, 2)),
        rho_raw=rng.normal(0.0, 1.0, size=(num_components, horizon)),
        score_logits=rng.normal(0.0, 2.0, size=num_components),
        layer_index=layer_index,
        bounds=DEFAULT_BOUNDS,
    )


def random_anchor_set(rng: np.random.Generator, num_components: int = 4, scale: float = 10.0) -> AnchorSet:
    return AnchorSet.from_endpoints(rng.uniform(-scale, scale, size=(num_components, 2)))


def random_scene(rng: np.random.Generator, context_dim: int = 3, horizon: int = 8, category: int = 0) -> Scene:
    return Scene(rng.normal(size=context_dim), random_trajectory(rng, horizon), 0, category)


def small_model(
    seed: int = 0,
    *,
    num_layers: int = 3,
    num_components: int = 4,
    horizon: int = 4,
    context_dim: int = 3,
    hidden_dim: int = 5,
    categories: tuple[int, ...] = (0,),
) -> ModelParams:
    """A tiny model with random anchors and non-zero biases, for gradient checks."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        context_dim=context_dim,
        hidden_dim=hidden_dim,
        num_layers=num_layers,
        num_components=num_components,
        horizon=horizon,
        seed=seed,
        head_init_scale=1.0,
    )
    anchors = {category: random_anchor_set(rng, num_components) for category in categories}
    params = init_model(cfg, anchors)
    # Zero biases would hide bias-gradient mistakes.
    return params.with_flat(params.flatten() + rng.normal(0.0, 0.05, size=params.num_parameters))


def central_differences(func: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar `func` at `x` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x, flat_grad = x.reshape(-1), grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + eps
        plus = func(x.copy())
        flat_x[i] = original - eps
        minus = func(x.copy())
        flat_x[i] = original
        flat_grad[i] = (plus - minus) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
