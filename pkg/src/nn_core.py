"""
Minimal dense-network engine used by the distillation lab.

An MlpModel is a chain of dense layers (weight in x out, bias, relu/identity).
One layer is the fixed-width embedding layer, placed before the final
classification layer; its activations are the features correlation congruence
is computed on, and mlp_backward accepts an extra gradient at that layer so
embedding-level and logit-level losses are optimised together.

All arrays are float64 numpy arrays; a batch is a b x in matrix.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from errors import DivergenceError, ParameterError, RejectedInputError
from utils import write_json

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")
CHECKPOINT_FORMAT = "cckd-mlp/1"


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise RejectedInputError(f"Layer weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise RejectedInputError(
                f"Layer bias shape {self.bias.shape} does not match weight output width {self.weight.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise RejectedInputError(f"Unknown activation '{self.activation}', expected one of {ACTIVATIONS}")

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpModel:
    layers: list[DenseLayer]
    embedding_index: int
    num_classes: int

    def __post_init__(self):
        if len(self.layers) < 2:
            raise RejectedInputError("An MlpModel needs at least an embedding layer and a classification layer")
        for position, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if prev.out_width != nxt.in_width:
                raise RejectedInputError(
                    f"Layer {position} outputs {prev.out_width} values but layer {position + 1} expects {nxt.in_width}"
                )
        if not 0 <= self.embedding_index < len(self.layers) - 1:
            raise RejectedInputError(
                f"embedding_index {self.embedding_index} must come before the final classification layer"
            )
        if self.layers[-1].out_width != self.num_classes:
            raise RejectedInputError(
                f"Final layer width {self.layers[-1].out_width} does not match num_classes {self.num_classes}"
            )

    @property
    def input_width(self) -> int:
        return self.layers[0].in_width

    @property
    def embedding_width(self) -> int:
        return self.layers[self.embedding_index].out_width

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: weight then bias for each layer."""
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def parameter_names(self) -> list[str]:
        names = []
        for position in range(len(self.layers)):
            names.extend([f"layer{position}.weight", f"layer{position}.bias"])
        return names

    def copy(self) -> MlpModel:
        return MlpModel(
            layers=[DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            embedding_index=self.embedding_index,
            num_classes=self.num_classes,
        )


@dataclass
class ForwardRecord:
    pre_activations: list[np.ndarray]
    # activations[0] is the input batch, activations[l + 1] the output of layer l
    activations: list[np.ndarray]
    embedding_index: int

    @property
    def embeddings(self) -> np.ndarray:
        return self.activations[self.embedding_index + 1]

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def batch_size(self) -> int:
        return self.activations[0].shape[0]


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ParameterError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ParameterError(f"weight_decay must be nonnegative, got {self.weight_decay}")

    @classmethod
    def for_model(cls, model: MlpModel, learning_rate: float, momentum: float = 0.9, weight_decay: float = 0.0):
        return cls(
            learning_rate=learning_rate,
            momentum=momentum,
            weight_decay=weight_decay,
            velocity=[np.zeros_like(p) for p in model.parameters()],
        )


def build_mlp(
    input_width: int,
    hidden_widths: Sequence[int],
    embedding_width: int,
    num_classes: int,
    rng: np.random.Generator,
) -> MlpModel:
    """
    Build [input -> hidden... (relu) -> embedding (identity) -> classes (identity)].

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases start at zero.
    """
    widths = [input_width, *hidden_widths, embedding_width, num_classes]
    if any(w < 1 for w in widths):
        raise RejectedInputError(f"All layer widths must be positive, got {widths}")

    layers = []
    for position, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        activation = "relu" if position < len(hidden_widths) else "identity"
        layers.append(DenseLayer(weight, np.zeros(fan_out), activation))

    return MlpModel(layers=layers, embedding_index=len(hidden_widths), num_classes=num_classes)


def mlp_forward(model: MlpModel, batch: np.ndarray) -> ForwardRecord:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_width:
        raise RejectedInputError(
            f"Batch of shape {batch.shape} does not match model input width {model.input_width}"
        )

    pre_activations = []
    activations = [batch]
    a = batch
    for layer in model.layers:
        z = a @ layer.weight + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        pre_activations.append(z)
        activations.append(a)

    return ForwardRecord(pre_activations, activations, model.embedding_index)


def softmax_with_temperature(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Softmax of z / tau along the last axis; accepts a single row or a batch."""
    if not tau > 0:
        raise ParameterError(f"Temperature must be positive, got {tau}")
    scaled = np.asarray(z, dtype=np.float64) / tau
    shifted = scaled - np.max(scaled, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def mlp_backward(
    model: MlpModel,
    record: ForwardRecord,
    grad_logits: np.ndarray,
    grad_embeddings: np.ndarray | None = None,
) -> list[np.ndarray]:
    """
    Gradients of the loss for every parameter, in model.parameters() order.

    grad_logits is dL/dlogits; grad_embeddings is dL/dembeddings from losses
    defined directly on the embedding layer, added to the gradient flowing back
    from the logits at that layer.
    """
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != record.logits.shape:
        raise RejectedInputError(
            f"grad_logits shape {grad_logits.shape} does not match logits shape {record.logits.shape}"
        )
    if grad_embeddings is not None:
        grad_embeddings = np.asarray(grad_embeddings, dtype=np.float64)
        if grad_embeddings.shape != record.embeddings.shape:
            raise RejectedInputError(
                f"grad_embeddings shape {grad_embeddings.shape} does not match embeddings shape {record.embeddings.shape}"
            )

    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(model.layers))
    g = grad_logits
    for position in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[position]
        if position == model.embedding_index and grad_embeddings is not None:
            g = g + grad_embeddings
        if layer.activation == "relu":
            g = g * (record.pre_activations[position] > 0)
        grads[2 * position] = record.activations[position].T @ g
        grads[2 * position + 1] = g.sum(axis=0)
        g = g @ layer.weight.T

    return grads


def sgd_momentum_step(
    model: MlpModel, gradients: list[np.ndarray], state: OptimizerState
) -> tuple[MlpModel, OptimizerState]:
    """
    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.

    Weight decay applies to weight matrices only. Parameters and velocity are
    updated in place.
    """
    params = model.parameters()
    if len(gradients) != len(params):
        raise RejectedInputError(f"Expected {len(params)} gradients, got {len(gradients)}")
    for name, param, grad in zip(model.parameter_names(), params, gradients):
        if grad.shape != param.shape:
            raise RejectedInputError(f"Gradient for {name} has shape {grad.shape}, expected {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"Non-finite gradient for {name}; aborting update")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]

    for position, (param, grad) in enumerate(zip(params, gradients)):
        # even positions are weights, odd positions biases
        decay = state.weight_decay if position % 2 == 0 else 0.0
        velocity = state.velocity[position]
        velocity *= state.momentum
        velocity += grad + decay * param
        param -= state.learning_rate * velocity

    return model, state


@dataclass
class GradientCheckEntry:
    parameter: int
    index: tuple[int, ...]
    analytic: float
    numeric: float
    relative_error: float


@dataclass
class GradientCheckReport:
    entries: list[GradientCheckEntry]

    @property
    def max_relative_error(self) -> float:
        return max((e.relative_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> GradientCheckEntry | None:
        return max(self.entries, key=lambda e: e.relative_error, default=None)

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error <= tolerance


def gradient_check(
    loss_closure: Callable[[], tuple[float, list[np.ndarray]]],
    parameters: list[np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-5,
) -> GradientCheckReport:
    """
    Compare the closure's analytic gradients with central differences.

    Each scalar parameter is perturbed in place by step * max(1, |theta|) and
    restored afterwards. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    _, analytic = loss_closure()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]

    entries = []
    for p_index, param in enumerate(parameters):
        for index in np.ndindex(param.shape):
            original = param[index]
            h = step * max(1.0, abs(original))
            param[index] = original + h
            loss_plus, _ = loss_closure()
            param[index] = original - h
            loss_minus, _ = loss_closure()
            param[index] = original

            numeric = (loss_plus - loss_minus) / (2.0 * h)
            a = float(analytic[p_index][index])
            relative_error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            entries.append(GradientCheckEntry(p_index, index, a, numeric, relative_error))

    report = GradientCheckReport(entries)
    if not report.passed(tolerance):
        worst = report.worst
        logger.warning(
            f"Gradient check failed: parameter {worst.parameter}{list(worst.index)} "
            f"analytic={worst.analytic:.6g} numeric={worst.numeric:.6g} rel={worst.relative_error:.3g}"
        )
    return report


def save_checkpoint(model: MlpModel, path: str) -> str:
    """Write the model as self-describing JSON; floats round-trip bitwise."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "embedding_index": model.embedding_index,
        "num_classes": model.num_classes,
        "layers": [
            {
                "shape": list(layer.weight.shape),
                "activation": layer.activation,
                "weight": layer.weight.ravel().tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in model.layers
        ],
    }
    return write_json(payload, path)


def load_checkpoint(path: str) -> MlpModel:
    try:
        with open(path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise RejectedInputError(f"Cannot read checkpoint {path}: {e}") from e
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise RejectedInputError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")

    layers = []
    for entry in payload["layers"]:
        rows, cols = entry["shape"]
        weight = np.array(entry["weight"], dtype=np.float64)
        if weight.size != rows * cols:
            raise RejectedInputError(f"{path}: weight has {weight.size} values, shape says {rows}x{cols}")
        layers.append(DenseLayer(weight.reshape(rows, cols), np.array(entry["bias"]), entry["activation"]))
    return MlpModel(layers, payload["embedding_index"], payload["num_classes"])
