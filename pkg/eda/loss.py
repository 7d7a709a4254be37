import dataclasses
import enum
import math
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field
from pydis_core.utils import logging

from eda.core import GaussianTrajectory, MatchBatch, MatchResult, MixtureBatch, MixtureOutput, Trajectory
from eda.utils.exceptions import ValidationError

log = logging.get_logger(__name__)

LOG_2PI = math.log(2 * math.pi)


class ClsKind(enum.StrEnum):
    """Classification loss applied to the score logits."""

    BCE = "bce"
    CE = "ce"


class LossConfig(BaseModel):
    """Weights of the regression and classification terms, globally and per decoder layer."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda_reg: float = Field(default=1.0, ge=0.0)
    lambda_cls: float = Field(default=1.0, ge=0.0)
    cls_kind: ClsKind = ClsKind.BCE
    # None means uniform weights of 1 on every layer.
    per_layer_weights: tuple[float, ...] | None = None

    def layer_weights(self, num_layers: int) -> tuple[float, ...]:
        """Per-layer weights, uniform unless configured; their count must match the layers."""
        if self.per_layer_weights is None:
            return (1.0,) * num_layers
        if len(self.per_layer_weights) != num_layers:
            raise ValidationError(
                "dimension mismatch", f"{len(self.per_layer_weights)} layer weights for {num_layers} layers"
            )
        return self.per_layer_weights


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    """Total loss and its per-layer regression / classification parts (unweighted)."""

    total: float
    reg: float
    cls: float
    per_layer: tuple[tuple[float, float], ...]


@dataclasses.dataclass(frozen=True)
class ComponentGradient:
    """Gradient of a scalar loss with respect to one Gaussian trajectory's parameters."""

    mu: np.ndarray
    log_sigma: np.ndarray
    rho_raw: np.ndarray


@dataclasses.dataclass(frozen=True)
class OutputGradient:
    """Gradient of a scalar loss with respect to every parameter of one `MixtureOutput`."""

    mu: np.ndarray
    log_sigma: np.ndarray
    rho_raw: np.ndarray
    score_logits: np.ndarray

    @classmethod
    def zeros_like(cls, output: MixtureOutput) -> "OutputGradient":
        """An all-zero gradient shaped like `output`."""
        return cls(
            np.zeros_like(output.mu),
            np.zeros_like(output.log_sigma),
            np.zeros_like(output.rho_raw),
            np.zeros_like(output.score_logits),
        )

    def __add__(self, other: "OutputGradient") -> "OutputGradient":
        return OutputGradient(
            self.mu + other.mu,
            self.log_sigma + other.log_sigma,
            self.rho_raw + other.rho_raw,
            self.score_logits + other.score_logits,
        )

    def scaled(self, factor: float) -> "OutputGradient":
        """Every array multiplied by `factor`."""
        return OutputGradient(
            self.mu * factor, self.log_sigma * factor, self.rho_raw * factor, self.score_logits * factor
        )

    def scene(self, index: int) -> "OutputGradient":
        """The gradient of scene `index` when the arrays carry a leading batch axis."""
        return OutputGradient(
            self.mu[index], self.log_sigma[index], self.rho_raw[index], self.score_logits[index]
        )


@dataclasses.dataclass(frozen=True)
class BatchLoss:
    """Per-scene losses of a batch and the gradient of their sum, one `OutputGradient` per layer."""

    total: np.ndarray
    reg: np.ndarray
    cls: np.ndarray
    # Shape (B, L, 2): unweighted regression and classification loss per scene and layer.
    per_layer: np.ndarray
    grads: list[OutputGradient]

    def breakdown(self, index: int) -> LossBreakdown:
        """The `LossBreakdown` of scene `index`."""
        return LossBreakdown(
            total=float(self.total[index]),
            reg=float(self.reg[index]),
            cls=float(self.cls[index]),
            per_layer=tuple((float(reg), float(cls)) for reg, cls in self.per_layer[index]),
        )


def gaussian_nll_batch(
    mu: np.ndarray, log_sigma: np.ndarray, rho_raw: np.ndarray, rho_bound: float, target: np.ndarray
) -> tuple[np.ndarray, ComponentGradient]:
    """
    Mean per-step bivariate Gaussian NLL of `target` and its gradient, over any leading axes.

    `mu`, `log_sigma` and `target` have shape (..., T, 2) and `rho_raw` (..., T).
    """
    horizon = mu.shape[-2]
    tanh_r = np.tanh(rho_raw)
    rho = rho_bound * tanh_r
    one_minus = 1.0 - rho**2
    sigma = np.exp(log_sigma)

    residual = target - mu
    u = residual[..., 0] / sigma[..., 0]
    v = residual[..., 1] / sigma[..., 1]
    quad = u**2 - 2 * rho * u * v + v**2

    per_step = log_sigma[..., 0] + log_sigma[..., 1] + 0.5 * np.log(one_minus) + LOG_2PI + quad / (2 * one_minus)
    loss = per_step.sum(axis=-1) / horizon

    g_mu = np.empty_like(mu)
    g_mu[..., 0] = -(u - rho * v) / (sigma[..., 0] * one_minus)
    g_mu[..., 1] = -(v - rho * u) / (sigma[..., 1] * one_minus)

    g_log_sigma = np.empty_like(log_sigma)
    g_log_sigma[..., 0] = 1.0 - (u**2 - rho * u * v) / one_minus
    g_log_sigma[..., 1] = 1.0 - (v**2 - rho * u * v) / one_minus

    g_rho = -rho / one_minus - u * v / one_minus + rho * quad / one_minus**2
    g_rho_raw = g_rho * rho_bound * (1.0 - tanh_r**2)

    return loss, ComponentGradient(g_mu / horizon, g_log_sigma / horizon, g_rho_raw / horizon)


def gaussian_nll_arrays(
    mu: np.ndarray, log_sigma: np.ndarray, rho_raw: np.ndarray, rho_bound: float, target: np.ndarray
) -> tuple[float, ComponentGradient]:
    """Mean per-step bivariate Gaussian NLL of `target` (T, 2) and its gradient."""
    loss, grad = gaussian_nll_batch(mu, log_sigma, rho_raw, rho_bound, target)
    return float(loss), grad


def gaussian_nll(comp: GaussianTrajectory, gt: Trajectory) -> tuple[float, ComponentGradient]:
    """Negative log-likelihood of the ground truth under one Gaussian trajectory, averaged over steps."""
    if comp.horizon != gt.horizon:
        raise ValidationError("length mismatch", f"component horizon {comp.horizon} vs ground truth {gt.horizon}")
    return gaussian_nll_arrays(comp.mu, comp.log_sigma, comp.rho_raw, comp.bounds.rho_bound, gt.points)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_scores_batch(
    logits: np.ndarray, positive_index: np.ndarray, distinct_mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """`bce_scores` for (B, N_C) logits and masks and (B,) positive indices."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(distinct_mask, dtype=np.bool_)
    positive_index = np.asarray(positive_index)
    rows = np.arange(logits.shape[0])
    if np.any(positive_index < 0) or np.any(positive_index >= logits.shape[1]):
        raise ValidationError("mask/positive inconsistency", "positive index outside the components")
    if not mask[rows, positive_index].all():
        raise ValidationError("mask/positive inconsistency", "the positive component must be distinct")

    targets = np.zeros_like(logits)
    targets[rows, positive_index] = 1.0
    counts = mask.sum(axis=1)

    per_component = np.logaddexp(0.0, logits) - targets * logits
    loss = np.where(mask, per_component, 0.0).sum(axis=1) / counts
    grad = np.where(mask, (_sigmoid(logits) - targets) / counts[:, None], 0.0)
    return loss, grad


def bce_scores(logits: ArrayLike, positive_index: int, distinct_mask: ArrayLike) -> tuple[float, np.ndarray]:
    """
    Binary cross entropy over the distinct components, averaged over them.

    The positive component has target 1, the other distinct components target
    0; masked-out components are neutral and receive a zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(distinct_mask, dtype=np.bool_)
    loss, grad = bce_scores_batch(logits[None], np.array([positive_index]), mask[None])
    return float(loss[0]), grad[0]


def ce_scores_batch(logits: np.ndarray, positive_index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """`ce_scores` for (B, N_C) logits and (B,) positive indices."""
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.arange(logits.shape[0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = log_norm - shifted[rows, positive_index]

    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, positive_index] -= 1.0
    return loss, grad


def ce_scores(logits: ArrayLike, positive_index: int) -> tuple[float, np.ndarray]:
    """Softmax cross entropy of the positive component over all components."""
    loss, grad = ce_scores_batch(np.asarray(logits, dtype=np.float64)[None], np.array([positive_index]))
    return float(loss[0]), grad[0]


def mixture_loss_batch(
    per_layer_outputs: Sequence[MixtureBatch],
    per_layer_matches: Sequence[MatchBatch],
    gt: np.ndarray,
    cfg: LossConfig,
) -> BatchLoss:
    """
    `mixture_loss` of every scene in a batch; `gt` holds the ground-truth points, shape (B, T, 2).

    The returned gradients are those of the summed losses, so each scene's slice
    is its own gradient.
    """
    if len(per_layer_outputs) != len(per_layer_matches):
        raise ValidationError(
            "dimension mismatch", f"{len(per_layer_outputs)} layer outputs for {len(per_layer_matches)} matches"
        )
    weights = cfg.layer_weights(len(per_layer_outputs))
    batch = gt.shape[0]
    rows = np.arange(batch)

    per_layer = np.zeros((batch, len(weights), 2))
    grads = []
    total, reg_sum, cls_sum = np.zeros(batch), np.zeros(batch), np.zeros(batch)
    for layer, (weight, output, match) in enumerate(zip(weights, per_layer_outputs, per_layer_matches, strict=True)):
        if output.mu.shape[2] != gt.shape[1]:
            raise ValidationError(
                "length mismatch", f"component horizon {output.mu.shape[2]} vs ground truth {gt.shape[1]}"
            )
        positive = match.positive_index
        reg, comp_grad = gaussian_nll_batch(
            output.mu[rows, positive],
            output.log_sigma[rows, positive],
            output.rho_raw[rows, positive],
            output.bounds.rho_bound,
            gt,
        )
        if cfg.cls_kind is ClsKind.BCE:
            cls, logit_grad = bce_scores_batch(output.score_logits, positive, match.distinct_mask)
        else:
            cls, logit_grad = ce_scores_batch(output.score_logits, positive)

        grad = OutputGradient(
            np.zeros_like(output.mu),
            np.zeros_like(output.log_sigma),
            np.zeros_like(output.rho_raw),
            logit_grad * (weight * cfg.lambda_cls),
        )
        grad.mu[rows, positive] = comp_grad.mu * (weight * cfg.lambda_reg)
        grad.log_sigma[rows, positive] = comp_grad.log_sigma * (weight * cfg.lambda_reg)
        grad.rho_raw[rows, positive] = comp_grad.rho_raw * (weight * cfg.lambda_reg)
        grads.append(grad)

        per_layer[:, layer, 0] = reg
        per_layer[:, layer, 1] = cls
        reg_sum += reg
        cls_sum += cls
        total += weight * (cfg.lambda_reg * reg + cfg.lambda_cls * cls)
        log.trace(f"Layer {output.layer_index}: mean reg {reg.mean():.4f}, mean cls {cls.mean():.4f}")

    return BatchLoss(total=total, reg=reg_sum, cls=cls_sum, per_layer=per_layer, grads=grads)


def mixture_loss(
    per_layer_outputs: Sequence[MixtureOutput],
    per_layer_matches: Sequence[MatchResult],
    gt: Trajectory,
    cfg: LossConfig,
) -> tuple[LossBreakdown, list[OutputGradient]]:
    """
    Deeply supervised mixture loss over every decoder layer.

    Only the positive component of each layer gets a regression gradient; with
    BCE only the distinct components get a score gradient.
    """
    if len(per_layer_outputs) != len(per_layer_matches):
        raise ValidationError(
            "dimension mismatch", f"{len(per_layer_outputs)} layer outputs for {len(per_layer_matches)} matches"
        )
    result = mixture_loss_batch(
        [MixtureBatch.stack([output]) for output in per_layer_outputs],
        [MatchBatch.stack([match]) for match in per_layer_matches],
        gt.points[None],
        cfg,
    )
    return result.breakdown(0), [grad.scene(0) for grad in result.grads]
