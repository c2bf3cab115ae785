"""
Pairwise instance-correlation metrics and the b x b correlation matrix of a
batch of embeddings.

Kinds:
  mmd         |mean(x) - mean(y)|
  bilinear    x . y (identity bilinear form)
  rbf_exact   exp(-gamma * |x - y|^2)
  rbf_taylor  sum_{p=0..P} exp(-2 gamma) (2 gamma)^p / p! * (x . y)^p

The Taylor form equals the Gaussian exactly only for unit-norm rows, so
rbf_taylor normalizes rows by default.
"""

from __future__ import annotations

import contextvars
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from errors import ParameterError, RejectedInputError

logger = logging.getLogger(__name__)

KERNEL_KINDS = ("mmd", "bilinear", "rbf_exact", "rbf_taylor")
UNIT_NORM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "rbf_taylor"
    gamma: float = 0.4
    order: int = 2
    normalize_rows: bool | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ParameterError(f"Unknown kernel kind '{self.kind}', expected one of {KERNEL_KINDS}")
        if self.kind in ("rbf_exact", "rbf_taylor") and not self.gamma > 0:
            raise ParameterError(f"gamma must be positive for {self.kind}, got {self.gamma}")
        if self.kind == "rbf_taylor" and (int(self.order) != self.order or self.order < 1):
            raise ParameterError(f"order must be an integer >= 1 for rbf_taylor, got {self.order}")
        if self.normalize_rows is None:
            object.__setattr__(self, "normalize_rows", self.kind == "rbf_taylor")

    def taylor_coefficients(self) -> np.ndarray:
        """alpha_p = exp(-2 gamma) (2 gamma)^p / p! for p = 0..order."""
        return taylor_coefficients(self.gamma, self.order)


@dataclass
class OperationCount:
    metric_evaluations: int = 0
    multiply_adds: int = 0


_counter: contextvars.ContextVar[OperationCount | None] = contextvars.ContextVar("kernel_counter", default=None)


@contextmanager
def count_operations():
    """Tally the work correlation_matrix does inside the block."""
    count = OperationCount()
    token = _counter.set(count)
    try:
        yield count
    finally:
        _counter.reset(token)


def _record(pairs: int, cost_per_pair: int) -> None:
    count = _counter.get()
    if count is not None:
        count.metric_evaluations += pairs
        count.multiply_adds += pairs * cost_per_pair


def taylor_coefficients(gamma: float, order: int) -> np.ndarray:
    p = np.arange(order + 1)
    factorials = np.array([math.factorial(int(k)) for k in p], dtype=np.float64)
    return np.exp(-2.0 * gamma) * (2.0 * gamma) ** p / factorials


def _as_vector(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise RejectedInputError(f"{name} must be a vector, got shape {v.shape}")
    return v


def _as_batch(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
        raise RejectedInputError(f"Embedding batch must be a nonempty b x d matrix, got shape {F.shape}")
    return F


def rbf_taylor(x, y, gamma: float, order: int, require_unit_norm: bool = True) -> float:
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    if x.shape != y.shape:
        raise RejectedInputError(f"Vectors have different lengths: {x.shape[0]} and {y.shape[0]}")
    if order < 1:
        raise ParameterError(f"order must be >= 1, got {order}")
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if require_unit_norm:
        for name, v in (("x", x), ("y", y)):
            norm = np.linalg.norm(v)
            if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
                raise RejectedInputError(f"{name} must have unit L2 norm for the Taylor expansion, got {norm:.6g}")
    dot = float(x @ y)
    coefficients = taylor_coefficients(gamma, order)
    return float(sum(a * dot**p for p, a in enumerate(coefficients)))


def pairwise_correlation(x, y, cfg: KernelConfig) -> float:
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    if x.shape != y.shape:
        raise RejectedInputError(f"Vectors have different lengths: {x.shape[0]} and {y.shape[0]}")
    if cfg.normalize_rows:
        x, y = l2_normalize_rows(np.stack([x, y]))

    if cfg.kind == "mmd":
        return abs(float(x.mean()) - float(y.mean()))
    if cfg.kind == "bilinear":
        return float(x @ y)
    if cfg.kind == "rbf_exact":
        diff = x - y
        return float(np.exp(-cfg.gamma * float(diff @ diff)))
    return rbf_taylor(x, y, cfg.gamma, cfg.order, require_unit_norm=cfg.normalize_rows)


def l2_normalize_rows(F) -> np.ndarray:
    """Scale each row to unit L2 norm; all-zero rows become e1."""
    F = np.asarray(F, dtype=np.float64)
    norms = np.linalg.norm(F, axis=1)
    zero = norms == 0
    out = F / np.where(zero, 1.0, norms)[:, None]
    if np.any(zero):
        out[zero] = 0.0
        out[zero, 0] = 1.0
    return out


def _mirror_upper(C: np.ndarray) -> np.ndarray:
    # one value per unordered pair, so the result is exactly symmetric
    return np.triu(C) + np.triu(C, 1).T


def correlation_matrix(F, cfg: KernelConfig) -> np.ndarray:
    F = _as_batch(F)
    G = l2_normalize_rows(F) if cfg.normalize_rows else F
    b, d = G.shape

    if cfg.kind == "mmd":
        means = G.mean(axis=1)
        C = np.abs(means[:, None] - means[None, :])
        cost = d
    elif cfg.kind == "bilinear":
        C = G @ G.T
        cost = d
    elif cfg.kind == "rbf_exact":
        diff = G[:, None, :] - G[None, :, :]
        C = np.exp(-cfg.gamma * np.einsum("ijk,ijk->ij", diff, diff))
        cost = d + 1
    else:
        S = G @ G.T
        C = np.polynomial.polynomial.polyval(S, cfg.taylor_coefficients())
        cost = d + cfg.order

    _record(b * (b + 1) // 2, cost)
    return _mirror_upper(C)


def _normalization_backward(F: np.ndarray, grad_G: np.ndarray) -> np.ndarray:
    """Chain dL/dG through G = F / |F| row-wise; zero rows map to a constant."""
    norms = np.linalg.norm(F, axis=1)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    G = F / safe[:, None]
    radial = np.sum(G * grad_G, axis=1, keepdims=True)
    grad_F = (grad_G - G * radial) / safe[:, None]
    grad_F[zero] = 0.0
    return grad_F


def correlation_matrix_grad(F, cfg: KernelConfig, upstream) -> np.ndarray:
    """Gradient of sum_ij upstream[i, j] * C[i, j] with respect to F."""
    F = _as_batch(F)
    b, d = F.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (b, b):
        raise RejectedInputError(f"upstream must be {b}x{b}, got shape {upstream.shape}")

    G = l2_normalize_rows(F) if cfg.normalize_rows else F
    # C is symmetric, so U[i, j] and U[j, i] act on the same entry
    A = upstream + upstream.T

    if cfg.kind == "mmd":
        means = G.mean(axis=1)
        signs = np.sign(means[:, None] - means[None, :])
        grad_means = np.sum(A * signs, axis=1)
        grad_G = np.repeat(grad_means[:, None] / d, d, axis=1)
    elif cfg.kind == "bilinear":
        grad_G = A @ G
    elif cfg.kind == "rbf_exact":
        diff = G[:, None, :] - G[None, :, :]
        C = np.exp(-cfg.gamma * np.einsum("ijk,ijk->ij", diff, diff))
        W = A * C
        grad_G = -2.0 * cfg.gamma * (W.sum(axis=1)[:, None] * G - W @ G)
    else:
        S = G @ G.T
        coefficients = cfg.taylor_coefficients()
        dC_dS = np.polynomial.polynomial.polyval(S, coefficients[1:] * np.arange(1, len(coefficients)))
        grad_G = (A * dC_dS) @ G

    if cfg.normalize_rows:
        return _normalization_backward(F, grad_G)
    return grad_G
