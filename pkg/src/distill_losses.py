"""
Distillation objectives and their gradients with respect to the student.

  cross_entropy  mean -log softmax(z)[y]
  kd_loss        mean tau^2 KL(p_t || p_s) on temperature-softened outputs
  mimic_loss     mean squared distance between student and teacher embeddings
  cc_loss        squared Frobenius distance between correlation matrices / b^2

The total is alpha * ce + (1 - alpha) * instance + beta * cc, where the
instance term is kd (or mimic in the feature-mimicking configuration).
Teacher quantities are constants: no gradient flows to them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from correlation_kernels import KernelConfig, correlation_matrix, correlation_matrix_grad
from errors import ConfigurationError, DivergenceError, ParameterError, RejectedInputError
from nn_core import ForwardRecord, softmax_with_temperature

logger = logging.getLogger(__name__)

LOSS_MODES = ("ce", "kd", "mimic", "cckd")
INSTANCE_LOSSES = ("kd", "mimic")
PROBABILITY_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0
    beta: float = 0.003
    tau: float = 4.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not self.beta >= 0:
            raise ParameterError(f"beta must be nonnegative, got {self.beta}")
        if not 0 <= self.alpha <= 1:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    kd: float
    cc: float
    total: float
    mimic: float | None = None

    def as_dict(self) -> dict:
        return {"ce": self.ce, "kd": self.kd, "mimic": self.mimic, "cc": self.cc, "total": self.total}


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise RejectedInputError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b, num_classes = logits.shape
    if labels.shape != (b,):
        raise RejectedInputError(f"Expected {b} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise RejectedInputError(f"Labels must lie in [0, {num_classes})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -float(log_probs[rows, labels].mean())

    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / b


def kd_loss(z_s, z_t, tau: float) -> tuple[float, np.ndarray]:
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    _same_shape(z_s, z_t, "kd_loss")
    p_s = softmax_with_temperature(z_s, tau)
    p_t = softmax_with_temperature(z_t, tau)
    b = z_s.shape[0]

    log_ratio = np.log(np.maximum(p_t, PROBABILITY_FLOOR)) - np.log(np.maximum(p_s, PROBABILITY_FLOOR))
    loss = tau**2 * float(np.sum(p_t * log_ratio)) / b
    # d/dz_s of tau^2 KL(p_t || softmax(z_s / tau)) = tau (p_s - p_t)
    grad = tau * (p_s - p_t) / b
    return loss, grad


def mimic_loss(F_s, F_t) -> tuple[float, np.ndarray]:
    F_s = np.asarray(F_s, dtype=np.float64)
    F_t = np.asarray(F_t, dtype=np.float64)
    _same_shape(F_s, F_t, "mimic_loss")
    diff = F_s - F_t
    b = F_s.shape[0]
    return float(np.sum(diff * diff)) / b, 2.0 * diff / b


def cc_loss(F_s, F_t, cfg: KernelConfig) -> tuple[float, np.ndarray]:
    F_s = np.asarray(F_s, dtype=np.float64)
    F_t = np.asarray(F_t, dtype=np.float64)
    _same_shape(F_s, F_t, "cc_loss")
    b = F_s.shape[0]
    diff = correlation_matrix(F_s, cfg) - correlation_matrix(F_t, cfg)
    loss = float(np.sum(diff * diff)) / b**2
    grad = correlation_matrix_grad(F_s, cfg, 2.0 * diff / b**2)
    return loss, grad


def cckd_total(ce: float, kd: float, cc: float, weights: LossWeights, mimic: float | None = None) -> LossBreakdown:
    components = {"ce": ce, "kd": kd, "cc": cc}
    if mimic is not None:
        components["mimic"] = mimic
    for name, value in components.items():
        if not math.isfinite(value):
            raise DivergenceError(f"Loss component {name} is not finite ({value})")

    instance = kd if mimic is None else mimic
    total = weights.alpha * ce + (1.0 - weights.alpha) * instance + weights.beta * cc
    return LossBreakdown(ce=ce, kd=kd, cc=cc, total=total, mimic=mimic)


def effective_weights(mode: str, weights: LossWeights) -> LossWeights:
    """The weights a loss mode actually optimises with."""
    if mode == "ce":
        return LossWeights(alpha=1.0, beta=0.0, tau=weights.tau)
    if mode in ("kd", "mimic"):
        return LossWeights(alpha=weights.alpha, beta=0.0, tau=weights.tau)
    if mode == "cckd":
        return weights
    raise ConfigurationError(f"Unknown loss mode '{mode}', expected one of {LOSS_MODES}")


def distillation_objective(
    student: ForwardRecord,
    teacher: ForwardRecord,
    labels: np.ndarray,
    weights: LossWeights,
    kernel: KernelConfig,
    mode: str = "cckd",
    instance_loss: str = "kd",
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """
    Evaluate the loss for one batch under a loss mode.

    Every component is measured in every mode (cc is logged even when it is not
    optimised); only the weights differ. Returns the breakdown and the
    gradients for the student's logits and embeddings.
    """
    if instance_loss not in INSTANCE_LOSSES:
        raise ConfigurationError(f"Unknown instance loss '{instance_loss}', expected one of {INSTANCE_LOSSES}")
    if mode == "mimic":
        instance_loss = "mimic"
    w = effective_weights(mode, weights)

    ce, grad_ce = cross_entropy(student.logits, labels)
    kd, grad_kd = kd_loss(student.logits, teacher.logits, w.tau)
    cc, grad_cc = cc_loss(student.embeddings, teacher.embeddings, kernel)

    if instance_loss == "mimic":
        mimic, grad_mimic = mimic_loss(student.embeddings, teacher.embeddings)
        breakdown = cckd_total(ce, kd, cc, w, mimic=mimic)
        grad_logits = w.alpha * grad_ce
        grad_embeddings = (1.0 - w.alpha) * grad_mimic + w.beta * grad_cc
    else:
        breakdown = cckd_total(ce, kd, cc, w)
        grad_logits = w.alpha * grad_ce + (1.0 - w.alpha) * grad_kd
        grad_embeddings = w.beta * grad_cc

    return breakdown, grad_logits, grad_embeddings
