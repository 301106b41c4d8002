"""Models, losses and the proximal local solver.

Parameters live in one flat float64 vector. Layout is layer-major; within a
layer the weight matrix of shape (fan_in, fan_out) comes first in row-major
order, followed by its bias vector.

Besides the two classifiers there is a quadratic objective,
F(w) = curvature/2 * mean_j ||w - x_j||^2 over the feature rows x_j, whose
minimiser and constants are known in closed form.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .data_io import LabeledDataset

logger = logging.getLogger("nbafl.learning")

# an objective step counts as a rise only above this relative slack
RISE_RTOL = 1e-12


class ShapeMismatchError(ValueError):
    """Parameters, architecture and data disagree on dimensions."""


class SolverDivergenceError(RuntimeError):
    """The proximal subproblem objective kept increasing."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"local solver diverged at inner step {step}")


class LossKind(str, Enum):
    LOGISTIC = "logistic"
    MLP = "mlp256"
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class ModelArch:
    """input_dim -> [hidden (ReLU)] -> n_classes (softmax), or a bare vector for quadratics."""

    input_dim: int
    n_classes: int
    hidden: Optional[int] = None
    kind: LossKind = LossKind.LOGISTIC

    def layer_dims(self) -> list[tuple[int, int]]:
        if self.kind is LossKind.QUADRATIC:
            return []
        if self.hidden is None:
            return [(self.input_dim, self.n_classes)]
        return [(self.input_dim, self.hidden), (self.hidden, self.n_classes)]

    @property
    def param_count(self) -> int:
        if self.kind is LossKind.QUADRATIC:
            return self.input_dim
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims())


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.LOGISTIC
    l2_reg: float = 0.0
    hidden: int = 256
    curvature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.l2_reg < 0:
            raise ValueError(f"l2_reg must be non-negative, got {self.l2_reg}")
        if not self.curvature > 0:
            raise ValueError(f"curvature must be positive, got {self.curvature}")

    def arch(self, input_dim: int, n_classes: int) -> ModelArch:
        hidden = self.hidden if self.kind is LossKind.MLP else None
        return ModelArch(input_dim=input_dim, n_classes=n_classes, hidden=hidden, kind=self.kind)


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    arch: ModelArch

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != self.arch.param_count:
            raise ShapeMismatchError(
                f"{values.size} values for an architecture with {self.arch.param_count} parameters"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def replace(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(values, self.arch)


@dataclass(frozen=True)
class ProximalConfig:
    mu: float
    inner_steps: int = 30
    learning_rate: float = 0.002
    inexactness_theta: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class LocalTrainResult:
    params: ModelParams
    theta: float  # achieved subproblem gradient norm
    objective: list[float] = field(default_factory=list)


def init_params(arch: ModelArch, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases; quadratic models start uniform in [-1, 1]."""
    if arch.kind is LossKind.QUADRATIC:
        return ModelParams(rng.uniform(-1.0, 1.0, size=arch.input_dim), arch)
    chunks = []
    for fan_in, fan_out in arch.layer_dims():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelParams(np.concatenate(chunks), arch)


def _unpack(values: np.ndarray, arch: ModelArch) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in arch.layer_dims():
        weights = values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = values[offset : offset + fan_out]
        offset += fan_out
        layers.append((weights, bias))
    return layers


def _check(params: ModelParams, data: LabeledDataset) -> None:
    if data.n_features != params.arch.input_dim:
        raise ShapeMismatchError(
            f"data has {data.n_features} features, model expects {params.arch.input_dim}"
        )
    if params.arch.kind is not LossKind.QUADRATIC and data.n_classes != params.arch.n_classes:
        raise ShapeMismatchError(
            f"data has {data.n_classes} classes, model expects {params.arch.n_classes}"
        )
    if len(data) == 0:
        raise ShapeMismatchError("empty dataset")


def predict_logits(params: ModelParams, data: LabeledDataset) -> np.ndarray:
    _check(params, data)
    if params.arch.kind is LossKind.QUADRATIC:
        raise ShapeMismatchError("quadratic objectives have no class logits")
    layers = _unpack(params.values, params.arch)
    hidden = data.features
    for weights, bias in layers[:-1]:
        hidden = np.maximum(hidden @ weights + bias, 0.0)
    weights, bias = layers[-1]
    return hidden @ weights + bias


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_gradient(
    params: ModelParams, spec: LossSpec, data: LabeledDataset
) -> tuple[float, np.ndarray]:
    """Mean per-sample loss (+ l2_reg * ||w||^2) and its exact gradient."""
    _check(params, data)
    if params.arch.kind is LossKind.QUADRATIC:
        return _quadratic(params, spec, data)
    n = len(data)
    layers = _unpack(params.values, params.arch)
    x = data.features

    activations = [x]
    pre_activations = []
    for weights, bias in layers[:-1]:
        z = activations[-1] @ weights + bias
        pre_activations.append(z)
        activations.append(np.maximum(z, 0.0))
    weights, bias = layers[-1]
    logits = activations[-1] @ weights + bias

    log_probs = _log_softmax(logits)
    rows = np.arange(n)
    value = -float(log_probs[rows, data.labels].mean())

    delta = np.exp(log_probs)
    delta[rows, data.labels] -= 1.0
    delta /= n

    grads = []
    for layer in range(len(layers) - 1, -1, -1):
        weights, _ = layers[layer]
        grads.append((activations[layer].T @ delta, delta.sum(axis=0)))
        if layer > 0:
            delta = (delta @ weights.T) * (pre_activations[layer - 1] > 0.0)
    grads.reverse()
    grad = np.concatenate([np.concatenate([gw.reshape(-1), gb]) for gw, gb in grads])

    if spec.l2_reg > 0.0:
        value += spec.l2_reg * float(params.values @ params.values)
        grad = grad + 2.0 * spec.l2_reg * params.values
    return value, grad


def _quadratic(
    params: ModelParams, spec: LossSpec, data: LabeledDataset
) -> tuple[float, np.ndarray]:
    w = params.values
    diff = w - data.features
    value = 0.5 * spec.curvature * float(np.mean(np.sum(diff * diff, axis=1)))
    grad = spec.curvature * (w - data.features.mean(axis=0))
    if spec.l2_reg > 0.0:
        value += spec.l2_reg * float(w @ w)
        grad = grad + 2.0 * spec.l2_reg * w
    return value, grad


def loss(params: ModelParams, spec: LossSpec, data: LabeledDataset) -> float:
    return loss_and_gradient(params, spec, data)[0]


def gradient(params: ModelParams, spec: LossSpec, data: LabeledDataset) -> np.ndarray:
    return loss_and_gradient(params, spec, data)[1]


def accuracy(params: ModelParams, spec: LossSpec, data: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index.

    Quadratic objectives have no classes and report NaN.
    """
    if params.arch.kind is LossKind.QUADRATIC:
        return float("nan")
    predictions = np.argmax(predict_logits(params, data), axis=1)
    return float(np.mean(predictions == data.labels))


def clip(params: ModelParams, clip_c: float) -> ModelParams:
    """Scale params onto the ball of radius clip_c; a no-op inside the ball."""
    if not clip_c > 0:
        raise ValueError(f"clip_c must be positive, got {clip_c}")
    norm = params.norm
    if norm <= clip_c:
        return params
    scaled = params.values * (clip_c / norm)
    # rounding can leave the norm a hair above clip_c, which would break idempotence
    while np.linalg.norm(scaled) > clip_c:
        scaled = scaled * (1.0 - np.finfo(np.float64).eps)
    return params.replace(scaled)


def local_train(
    w_anchor: ModelParams, shard: LabeledDataset, spec: LossSpec, prox: ProximalConfig
) -> LocalTrainResult:
    """Full-batch gradient descent on F_i(w) + mu/2 ||w - w_anchor||^2, started at the anchor.

    Stable for learning_rate < 2 / (rho + mu) where rho is the smoothness of F_i.
    """
    anchor = w_anchor.values
    w = anchor.copy()
    objective = []
    rises = 0
    for step in range(prox.inner_steps):
        value, grad = loss_and_gradient(w_anchor.replace(w), spec, shard)
        diff = w - anchor
        value += 0.5 * prox.mu * float(diff @ diff)
        if objective and value > objective[-1] + RISE_RTOL * max(1.0, abs(objective[-1])):
            rises += 1
            if rises >= 3:
                raise SolverDivergenceError(step)
        else:
            rises = 0
        objective.append(value)
        w = w - prox.learning_rate * (grad + prox.mu * diff)
        if not np.all(np.isfinite(w)):
            raise SolverDivergenceError(step, f"non-finite parameters at inner step {step}")

    final_value, grad = loss_and_gradient(w_anchor.replace(w), spec, shard)
    diff = w - anchor
    objective.append(final_value + 0.5 * prox.mu * float(diff @ diff))
    theta = float(np.linalg.norm(grad + prox.mu * diff))
    logger.debug(f"local_train: {prox.inner_steps} steps, subproblem gradient norm {theta:.3e}")
    return LocalTrainResult(params=w_anchor.replace(w), theta=theta, objective=objective)
