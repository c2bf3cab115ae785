"""
Mini-batch construction strategies.

  ur   uniform random: a shuffled epoch chunked into full batches
  cur  class-uniform random: every batch holds b/k distinct classes with k examples each
  sur  superclass-uniform random: cur over k-means clusters of teacher embeddings

Plans are drawn from a caller-owned numpy Generator, so the same seed always
yields the same plan.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import ConfigurationError, RejectedInputError
from nn_core import MlpModel, mlp_forward
from utils import write_csv

logger = logging.getLogger(__name__)

STRATEGIES = ("ur", "cur", "sur")


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "cur"
    batch_size: int = 40
    per_class: int = 4
    num_superclasses: int = 10
    kmeans_iters: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"Unknown sampler '{self.strategy}', expected one of {STRATEGIES}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.strategy in ("cur", "sur"):
            if self.per_class < 1 or self.batch_size % self.per_class != 0:
                raise ConfigurationError(
                    f"per_class k={self.per_class} must be >= 1 and divide batch_size {self.batch_size}"
                )
        if self.strategy == "sur" and self.num_superclasses < 2:
            raise ConfigurationError(f"num_superclasses must be >= 2 for sur, got {self.num_superclasses}")

    @property
    def classes_per_batch(self) -> int:
        return self.batch_size // self.per_class


@dataclass
class SuperclassAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    # within-cluster sum of squares after each assignment step
    inertia_history: list[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


@dataclass
class SamplerPlan:
    batches: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


class _CyclingPool:
    """Draws items in shuffled cycles: every item appears once before any repeats."""

    def __init__(self, items: np.ndarray, rng: np.random.Generator):
        self.items = np.asarray(items)
        self.rng = rng
        self.queue: list = []

    def draw(self, count: int) -> list:
        # count <= len(items), so a single draw never repeats an item
        picked: list = []
        while len(picked) < count:
            if not self.queue:
                fresh = self.rng.permutation(self.items).tolist()
                # items already in this draw wait for the end of the new cycle
                self.queue = [x for x in fresh if x not in picked] + [x for x in fresh if x in picked]
            picked.append(self.queue.pop(0))
        return picked


def ur_sample(dataset_size: int, cfg: SamplerConfig, rng: np.random.Generator) -> SamplerPlan:
    b = cfg.batch_size
    if dataset_size < b:
        raise RejectedInputError(f"Dataset of {dataset_size} examples is smaller than batch size {b}")
    order = rng.permutation(dataset_size)
    num_batches = dataset_size // b
    return SamplerPlan([order[i * b:(i + 1) * b] for i in range(num_batches)])


def cur_sample(labels, cfg: SamplerConfig, rng: np.random.Generator) -> SamplerPlan:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    m = cfg.classes_per_batch
    if len(classes) < m:
        raise ConfigurationError(
            f"Batch of {cfg.batch_size} with k={cfg.per_class} needs {m} classes, only {len(classes)} available"
        )

    members = {c: np.flatnonzero(labels == c) for c in classes.tolist()}
    class_pool = _CyclingPool(classes, rng)
    example_pools = {c: _CyclingPool(idx, rng) for c, idx in members.items() if len(idx) >= cfg.per_class}

    batches = []
    for _ in range(len(labels) // cfg.batch_size):
        batch = []
        for c in class_pool.draw(m):
            if c in example_pools:
                batch.extend(example_pools[c].draw(cfg.per_class))
            else:
                # too few examples: sample with replacement to keep k per class
                batch.extend(rng.choice(members[c], cfg.per_class, replace=True).tolist())
        batches.append(np.array(batch, dtype=np.int64))
    return SamplerPlan(batches)


def _squared_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.sum((X[:, None, :] - centroids[None, :, :]) ** 2, axis=2)


def _kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((K, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    for i in range(1, K):
        dist_sq = _squared_distances(X, centroids[:i]).min(axis=1)
        total = dist_sq.sum()
        if total > 0:
            centroids[i] = X[rng.choice(n, p=dist_sq / total)]
        else:
            centroids[i] = X[rng.integers(n)]
    return centroids


def kmeans(features, K: int, iters: int = 50, seed: int = 0) -> SuperclassAssignment:
    """Lloyd's iterations from k-means++ seeding; stops early once assignments are stable."""
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if n < K:
        raise RejectedInputError(f"Cannot form {K} clusters from {n} examples")
    rng = np.random.default_rng(seed)

    centroids = _kmeans_plusplus(X, K, rng)
    distances = _squared_distances(X, centroids)
    labels = distances.argmin(axis=1)
    history = [float(distances[np.arange(n), labels].sum())]

    for _ in range(iters):
        for j in range(K):
            mask = labels == j
            if np.any(mask):
                centroids[j] = X[mask].mean(axis=0)
            else:
                # empty cluster: re-seed at the point farthest from its own centroid
                own = distances[np.arange(n), labels]
                centroids[j] = X[own.argmax()]
        distances = _squared_distances(X, centroids)
        new_labels = distances.argmin(axis=1)
        history.append(float(distances[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    return SuperclassAssignment(labels=labels, centroids=centroids, inertia_history=history)


def assign_superclasses(teacher_model: MlpModel, features, cfg: SamplerConfig) -> SuperclassAssignment:
    embeddings = mlp_forward(teacher_model, features).embeddings
    assignment = kmeans(embeddings, cfg.num_superclasses, cfg.kmeans_iters, cfg.seed)
    sizes = np.bincount(assignment.labels, minlength=cfg.num_superclasses)
    logger.info(
        f"k-means: {cfg.num_superclasses} superclasses over {len(embeddings)} teacher embeddings, "
        f"sizes {sizes.min()}-{sizes.max()}, inertia {assignment.inertia:.4g}"
    )
    return assignment


def sur_sample(
    teacher_model: MlpModel,
    features,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    assignment: SuperclassAssignment | None = None,
) -> SamplerPlan:
    if assignment is None:
        assignment = assign_superclasses(teacher_model, features, cfg)
    return cur_sample(assignment.labels, cfg, rng)


def export_superclasses(assignment: SuperclassAssignment, path: str) -> str:
    df = pd.DataFrame({
        "example_index": np.arange(len(assignment.labels)),
        "cluster_index": assignment.labels,
    })
    return write_csv(df, path)


class EpochSampler:
    """
    Produces one plan per epoch for a training set, owning the sampler's Generator.
    k-means for sur runs once, at construction.
    """

    def __init__(self, cfg: SamplerConfig, labels, rng: np.random.Generator, teacher_model: MlpModel | None = None, features=None):
        self.cfg = cfg
        self.labels = np.asarray(labels)
        self.rng = rng
        self.assignment = None
        if cfg.strategy == "sur":
            if teacher_model is None or features is None:
                raise ConfigurationError("The sur sampler needs a teacher model and training features")
            self.assignment = assign_superclasses(teacher_model, features, cfg)

    def plan_epoch(self) -> SamplerPlan:
        if self.cfg.strategy == "ur":
            return ur_sample(len(self.labels), self.cfg, self.rng)
        if self.cfg.strategy == "cur":
            return cur_sample(self.labels, self.cfg, self.rng)
        return cur_sample(self.assignment.labels, self.cfg, self.rng)
