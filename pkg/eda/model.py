import dataclasses
from collections.abc import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydis_core.utils import logging

from eda.core import AnchorSet, GaussianBounds, MixtureBatch, MixtureOutput, Scene
from eda.loss import OutputGradient
from eda.utils.exceptions import NonFiniteGradientError, ValidationError

log = logging.get_logger(__name__)

Gradients = dict[str, np.ndarray]


class ModelConfig(BaseModel):
    """Architecture sizes and output bounds."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    context_dim: int = Field(gt=0)
    hidden_dim: int = Field(default=64, gt=0)
    num_layers: int = Field(default=6, gt=0)
    num_components: int = Field(default=16, ge=2)
    horizon: int = Field(default=16, gt=0)
    dt: float = Field(default=0.5, gt=0)
    seed: int = 0
    # Length scale used to normalise endpoint features and to scale mean offsets.
    pos_scale: float = Field(default=50.0, gt=0)
    # Output heads start smaller than the hidden layers so initial offsets stay near the anchors.
    head_init_scale: float = Field(default=0.05, gt=0)
    log_sigma_min: float = -5.0
    log_sigma_max: float = 5.0
    rho_bound: float = Field(default=0.5, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_sigma_bounds(self) -> "ModelConfig":
        if self.log_sigma_min >= self.log_sigma_max:
            raise ValueError("log_sigma_min must be below log_sigma_max")
        return self

    @property
    def bounds(self) -> GaussianBounds:
        """Output bounds shared by every `MixtureOutput` of the model."""
        return GaussianBounds(self.log_sigma_min, self.log_sigma_max, self.rho_bound)


@dataclasses.dataclass(frozen=True, eq=False)
class ModelParams:
    """
    Trainable arrays by name, plus the predefined anchor endpoints each category's queries were seeded from.

    With N_C components, T steps, H hidden units and D context features:

        encoder.weight            (H, D)          encoder.bias            (H,)
        queries.<category>        (N_C, H)
        layer<l>.hidden.weight    (H, 2H + 2)     layer<l>.hidden.bias    (H,)
        layer<l>.mu.weight        (2T, H)         layer<l>.mu.bias        (2T,)
        layer<l>.log_sigma.weight (2T, H)         layer<l>.log_sigma.bias (2T,)
        layer<l>.rho.weight       (T, H)          layer<l>.rho.bias       (T,)
        layer<l>.score.weight     (H,)            layer<l>.score.bias     (1,)

    Layer l reads the encoded context, the component query and the endpoint of
    the previous layer's mean, and adds a residual offset to that mean. Layer 1
    starts from the straight line between the origin and each anchor endpoint.
    """

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    anchors: dict[int, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.config == other.config
            and _arrays_equal(self.arrays, other.arrays)
            and _arrays_equal(self.anchors, other.anchors)
        )

    __hash__ = None

    @property
    def names(self) -> list[str]:
        """Array names in a stable order."""
        return list(self.arrays)

    @property
    def num_parameters(self) -> int:
        """Total number of trainable values."""
        return sum(array.size for array in self.arrays.values())

    def flatten(self) -> np.ndarray:
        """All trainable values as one vector, in `names` order."""
        return np.concatenate([self.arrays[name].ravel() for name in self.names])

    def with_flat(self, vector: np.ndarray) -> "ModelParams":
        """A copy whose trainable values are taken from `vector` (inverse of `flatten`)."""
        arrays, offset = {}, 0
        for name in self.names:
            array = self.arrays[name]
            arrays[name] = np.asarray(vector[offset:offset + array.size], dtype=np.float64).reshape(array.shape)
            offset += array.size
        return dataclasses.replace(self, arrays=arrays)

    def anchor_set(self, category: int) -> AnchorSet:
        """The predefined anchors of `category`."""
        return AnchorSet.from_endpoints(self.anchors[category], category)


def _arrays_equal(first: Mapping[object, np.ndarray], second: Mapping[object, np.ndarray]) -> bool:
    return first.keys() == second.keys() and all(
        first[key].shape == second[key].shape and np.array_equal(first[key], second[key]) for key in first
    )


def flatten_gradients(params: ModelParams, grads: Gradients) -> np.ndarray:
    """Gradients as one vector, in the order of `params.flatten()`."""
    return np.concatenate([grads[name].ravel() for name in params.names])


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, scale: float = 1.0) -> np.ndarray:
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(cfg: ModelConfig, predefined: AnchorSet | Mapping[int, AnchorSet]) -> ModelParams:
    """
    Seeded initial parameters.

    Weights are drawn from a symmetric uniform distribution scaled by fan-in and
    biases start at zero. Each category's component queries are a fixed random
    linear embedding of its normalised anchor endpoints.
    """
    anchor_sets = {predefined.category: predefined} if isinstance(predefined, AnchorSet) else dict(predefined)
    for category, anchor_set in anchor_sets.items():
        if len(anchor_set) != cfg.num_components:
            raise ValidationError(
                "dimension mismatch",
                f"category {category} has {len(anchor_set)} anchors for {cfg.num_components} components",
            )

    rng = np.random.default_rng(cfg.seed)
    H, D, T = cfg.hidden_dim, cfg.context_dim, cfg.horizon
    arrays: Gradients = {
        "encoder.weight": _uniform(rng, (H, D), D),
        "encoder.bias": np.zeros(H),
    }

    embedding = rng.uniform(-1.0, 1.0, size=(H, 2))
    anchors = {}
    for category in sorted(anchor_sets):
        endpoints = anchor_sets[category].endpoints
        anchors[category] = endpoints.copy()
        arrays[f"queries.{category}"] = (endpoints / cfg.pos_scale) @ embedding.T

    for layer in range(1, cfg.num_layers + 1):
        arrays[f"layer{layer}.hidden.weight"] = _uniform(rng, (H, 2 * H + 2), 2 * H + 2)
        arrays[f"layer{layer}.hidden.bias"] = np.zeros(H)
        arrays[f"layer{layer}.mu.weight"] = _uniform(rng, (2 * T, H), H, cfg.head_init_scale)
        arrays[f"layer{layer}.mu.bias"] = np.zeros(2 * T)
        arrays[f"layer{layer}.log_sigma.weight"] = _uniform(rng, (2 * T, H), H, cfg.head_init_scale)
        arrays[f"layer{layer}.log_sigma.bias"] = np.zeros(2 * T)
        arrays[f"layer{layer}.rho.weight"] = _uniform(rng, (T, H), H, cfg.head_init_scale)
        arrays[f"layer{layer}.rho.bias"] = np.zeros(T)
        arrays[f"layer{layer}.score.weight"] = _uniform(rng, (H,), H, cfg.head_init_scale)
        arrays[f"layer{layer}.score.bias"] = np.zeros(1)

    log.debug(f"Initialised a {cfg.num_layers}-layer model with {sum(a.size for a in arrays.values())} parameters.")
    return ModelParams(cfg, arrays, anchors)


@dataclasses.dataclass
class _LayerCache:
    features: np.ndarray
    hidden: np.ndarray
    log_sigma_raw: np.ndarray


@dataclasses.dataclass
class ForwardPass:
    """Stacked outputs of every decoder layer for a batch, plus what `backward_pass` needs to revisit them."""

    context: np.ndarray
    encoded: np.ndarray
    categories: np.ndarray
    anchor_endpoints: np.ndarray
    outputs: list[MixtureBatch]
    layers: list[_LayerCache]

    def __len__(self) -> int:
        return self.context.shape[0]


def _stack_inputs(params: ModelParams, scenes: Sequence[Scene]) -> tuple[np.ndarray, np.ndarray]:
    cfg = params.config
    context = np.stack([scene.context for scene in scenes])
    if context.shape[1] != cfg.context_dim:
        raise ValidationError("dimension mismatch", f"context dimension {context.shape[1]} != {cfg.context_dim}")
    categories = np.array([scene.category for scene in scenes])
    missing = set(categories.tolist()) - params.anchors.keys()
    if missing:
        raise ValidationError("dimension mismatch", f"no anchors for categories {sorted(missing)}")
    return context, categories


def forward_pass(params: ModelParams, scenes: Sequence[Scene]) -> ForwardPass:
    """Run the model on a batch of scenes, keeping the intermediate activations."""
    cfg = params.config
    H, T, N = cfg.hidden_dim, cfg.horizon, cfg.num_components
    context, categories = _stack_inputs(params, scenes)
    batch = context.shape[0]

    encoded = np.tanh(context @ params["encoder.weight"].T + params["encoder.bias"])
    queries = np.stack([params[f"queries.{category}"] for category in categories])
    anchor_endpoints = np.stack([params.anchors[category] for category in categories])

    fraction = np.arange(1, T + 1) / T
    mean = fraction[None, None, :, None] * anchor_endpoints[:, :, None, :]
    encoded_tiled = np.broadcast_to(encoded[:, None, :], (batch, N, H))

    result = ForwardPass(context, encoded, categories, anchor_endpoints, [], [])
    for layer in range(1, cfg.num_layers + 1):
        prefix = f"layer{layer}"
        features = np.concatenate([encoded_tiled, queries, mean[:, :, -1, :] / cfg.pos_scale], axis=2)
        hidden = np.tanh(features @ params[f"{prefix}.hidden.weight"].T + params[f"{prefix}.hidden.bias"])

        offset = hidden @ params[f"{prefix}.mu.weight"].T + params[f"{prefix}.mu.bias"]
        mean = mean + cfg.pos_scale * offset.reshape(batch, N, T, 2)
        log_sigma_raw = (hidden @ params[f"{prefix}.log_sigma.weight"].T + params[f"{prefix}.log_sigma.bias"]).reshape(
            batch, N, T, 2
        )
        rho_raw = hidden @ params[f"{prefix}.rho.weight"].T + params[f"{prefix}.rho.bias"]
        logits = hidden @ params[f"{prefix}.score.weight"] + params[f"{prefix}.score.bias"][0]

        result.layers.append(_LayerCache(features, hidden, log_sigma_raw))
        result.outputs.append(
            MixtureBatch(
                mean,
                np.clip(log_sigma_raw, cfg.log_sigma_min, cfg.log_sigma_max),
                rho_raw,
                logits,
                layer,
                cfg.dt,
                cfg.bounds,
            )
        )
    return result


def forward_batch(params: ModelParams, scenes: Sequence[Scene]) -> list[list[MixtureOutput]]:
    """Per scene, the `MixtureOutput` of every decoder layer."""
    result = forward_pass(params, scenes)
    return [[output.scene(b) for output in result.outputs] for b in range(len(scenes))]


def forward(params: ModelParams, scene: Scene) -> list[MixtureOutput]:
    """The `MixtureOutput` of every decoder layer for one scene."""
    return forward_batch(params, [scene])[0]


def backward_pass(params: ModelParams, result: ForwardPass, layer_grads: Sequence[OutputGradient]) -> Gradients:
    """
    Reverse-mode gradient of `forward_pass`, summed over the batch.

    `layer_grads[l]` is the gradient of the scalar objective with respect to
    layer l+1's stacked outputs, with the batch as leading axis.
    """
    cfg = params.config
    H, T, N = cfg.hidden_dim, cfg.horizon, cfg.num_components
    if len(layer_grads) != cfg.num_layers:
        raise ValidationError("dimension mismatch", "one gradient per decoder layer is required")

    batch = len(result)
    rows = batch * N
    grads: Gradients = {name: np.zeros_like(array) for name, array in params.arrays.items()}

    g_encoded = np.zeros((batch, H))
    g_queries = np.zeros((batch, N, H))
    g_mean_carry = np.zeros((batch, N, T, 2))

    for layer in range(cfg.num_layers, 0, -1):
        index = layer - 1
        prefix = f"layer{layer}"
        layer_cache = result.layers[index]
        hidden = layer_cache.hidden.reshape(rows, H)
        output_grad = layer_grads[index]

        g_mean = output_grad.mu + g_mean_carry
        # np.clip passes the gradient at the bounds themselves.
        inside = (layer_cache.log_sigma_raw >= cfg.log_sigma_min) & (layer_cache.log_sigma_raw <= cfg.log_sigma_max)
        g_offset = (cfg.pos_scale * g_mean).reshape(rows, 2 * T)
        g_log_sigma_raw = (output_grad.log_sigma * inside).reshape(rows, 2 * T)
        g_rho = output_grad.rho_raw.reshape(rows, T)
        g_logits = output_grad.score_logits.reshape(rows)

        grads[f"{prefix}.mu.weight"] += g_offset.T @ hidden
        grads[f"{prefix}.mu.bias"] += g_offset.sum(axis=0)
        grads[f"{prefix}.log_sigma.weight"] += g_log_sigma_raw.T @ hidden
        grads[f"{prefix}.log_sigma.bias"] += g_log_sigma_raw.sum(axis=0)
        grads[f"{prefix}.rho.weight"] += g_rho.T @ hidden
        grads[f"{prefix}.rho.bias"] += g_rho.sum(axis=0)
        grads[f"{prefix}.score.weight"] += g_logits @ hidden
        grads[f"{prefix}.score.bias"] += g_logits.sum()

        g_hidden = (
            g_offset @ params[f"{prefix}.mu.weight"]
            + g_log_sigma_raw @ params[f"{prefix}.log_sigma.weight"]
            + g_rho @ params[f"{prefix}.rho.weight"]
            + g_logits[:, None] * params[f"{prefix}.score.weight"]
        )
        g_pre = g_hidden * (1.0 - hidden**2)
        grads[f"{prefix}.hidden.weight"] += g_pre.T @ layer_cache.features.reshape(rows, -1)
        grads[f"{prefix}.hidden.bias"] += g_pre.sum(axis=0)

        g_features = (g_pre @ params[f"{prefix}.hidden.weight"]).reshape(batch, N, -1)
        g_encoded += g_features[:, :, :H].sum(axis=1)
        g_queries += g_features[:, :, H:2 * H]

        # The previous mean feeds this layer twice: through the residual and through its endpoint feature.
        g_mean_carry = g_mean.copy()
        g_mean_carry[:, :, -1, :] += g_features[:, :, 2 * H:] / cfg.pos_scale

    g_encoder_pre = g_encoded * (1.0 - result.encoded**2)
    grads["encoder.weight"] += g_encoder_pre.T @ result.context
    grads["encoder.bias"] += g_encoder_pre.sum(axis=0)
    for category in np.unique(result.categories):
        grads[f"queries.{category}"] += g_queries[result.categories == category].sum(axis=0)

    return grads


def backward_batch(
    params: ModelParams, scenes: Sequence[Scene], output_grads: Sequence[Sequence[OutputGradient]]
) -> Gradients:
    """
    Reverse-mode gradient of `forward_batch`, summed over the batch.

    `output_grads[b][l]` is the gradient of the scalar objective with respect
    to layer l+1's output for scene b.
    """
    num_layers = params.config.num_layers
    if len(output_grads) != len(scenes) or any(len(grads) != num_layers for grads in output_grads):
        raise ValidationError("dimension mismatch", "one gradient per scene and decoder layer is required")

    layer_grads = [
        OutputGradient(
            np.stack([grads[layer].mu for grads in output_grads]),
            np.stack([grads[layer].log_sigma for grads in output_grads]),
            np.stack([grads[layer].rho_raw for grads in output_grads]),
            np.stack([grads[layer].score_logits for grads in output_grads]),
        )
        for layer in range(num_layers)
    ]
    return backward_pass(params, forward_pass(params, scenes), layer_grads)


def backward(params: ModelParams, scene: Scene, per_layer_output_grads: Sequence[OutputGradient]) -> Gradients:
    """Reverse-mode gradient of `forward` for one scene."""
    return backward_batch(params, [scene], [per_layer_output_grads])


@dataclasses.dataclass(frozen=True)
class AdamState:
    """First and second moment estimates and the number of steps taken."""

    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        """Zero moments for every array of `params`."""
        return cls(
            0,
            {name: np.zeros_like(array) for name, array in params.arrays.items()},
            {name: np.zeros_like(array) for name, array in params.arrays.items()},
        )


def adam_step(
    params: ModelParams,
    grads: Gradients,
    state: AdamState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[ModelParams, AdamState]:
    """
    One Adam update with bias correction; `weight_decay` > 0 decays weights decoupled from the gradient.

    Raises `NonFiniteGradientError` before touching anything if a gradient holds NaN or inf.
    """
    for name in params.names:
        if grads[name].shape != params[name].shape:
            raise ValidationError("dimension mismatch", f"gradient shape {grads[name].shape} for `{name}`")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)

    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    arrays, first, second = {}, {}, {}
    for name in params.names:
        first[name] = beta1 * state.first_moment[name] + (1.0 - beta1) * grads[name]
        second[name] = beta2 * state.second_moment[name] + (1.0 - beta2) * grads[name] ** 2
        update = (first[name] / correction1) / (np.sqrt(second[name] / correction2) + eps)
        decayed = params[name] * (1.0 - lr * weight_decay) if weight_decay else params[name]
        arrays[name] = decayed - lr * update

    return dataclasses.replace(params, arrays=arrays), AdamState(step, first, second)
