from os import environ

from pydantic import Field
from pydantic_settings import BaseSettings
from pydis_core.utils import logging

log = logging.get_logger(__name__)


class EnvConfig(
    BaseSettings,
    env_file=".env",
    env_file_encoding="utf-8",
    env_nested_delimiter="__",
    extra="ignore",
):
    """Our default configuration for models that should load from .env files."""


class _Runtime(EnvConfig, env_prefix="EDA_"):
    # Upper bound on scene-level worker threads; results never depend on it.
    threads: int = Field(default=1, ge=1)
    debug: bool = False
    trace_logging: bool = False
    sentry_dsn: str = ""


Runtime = _Runtime()


class _Split(EnvConfig, env_prefix="SPLIT_"):
    # The first `train_fraction` of a scene file trains, the rest is held out.
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)


Split = _Split()


class _Files(EnvConfig, env_prefix="FILE_"):
    scenes: str = "scenes.edar"
    anchors: str = "anchors.edar"
    model: str = "model.edar"
    metrics: str = "metrics.csv"
    train_log: str = "train_log.csv"
    layers: str = "layers.csv"
    runs: str = "runs.csv"


Files = _Files()


# Git SHA for Sentry
GIT_SHA = environ.get("GIT_SHA", "development")

# Names of the default maneuvers, in latent-mode order.
MANEUVER_NAMES = (
    "hard-left",
    "soft-left",
    "straight-slow",
    "straight-fast",
    "soft-right",
    "hard-right",
)

# Ablation grid of the evolving-anchor study.
DEFAULT_EVOLVE_TIMES = (0, 1, 2, 5)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
