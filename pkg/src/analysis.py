"""
Post-hoc analysis of student embeddings: cosine-similarity matrices,
intra/inter-class similarity statistics, heatmap export and loss-curve export.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from correlation_kernels import l2_normalize_rows
from errors import MissingStatisticError, RejectedInputError
from utils import write_csv

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["run_id", "epoch", "ce", "kd", "cc", "total", "test_top1"]


@dataclass
class SimilarityStats:
    mean_intra: float
    mean_inter: float
    # mean similarity of distinct same-label pairs, per class (None for singleton classes)
    per_class_intra: dict[int, float | None] = field(default_factory=dict)
    # mean unit-normalised embedding per class
    class_means: dict[int, np.ndarray] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "mean_intra": self.mean_intra,
            "mean_inter": self.mean_inter,
            "per_class_intra": {str(k): v for k, v in self.per_class_intra.items()},
            "class_means": {str(k): v.tolist() for k, v in self.class_means.items()},
        }


def cosine_similarity_matrix(F) -> np.ndarray:
    G = l2_normalize_rows(np.asarray(F, dtype=np.float64))
    S = np.clip(G @ G.T, -1.0, 1.0)
    S = np.triu(S, 1) + np.triu(S, 1).T
    np.fill_diagonal(S, 1.0)
    return S


def intra_inter_stats(F, labels) -> SimilarityStats:
    labels = np.asarray(labels)
    S = cosine_similarity_matrix(F)
    if labels.shape != (S.shape[0],):
        raise RejectedInputError(f"Expected {S.shape[0]} labels, got shape {labels.shape}")

    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(labels), dtype=bool)
    intra_mask = same & off_diagonal
    inter_mask = ~same
    if not intra_mask.any():
        raise MissingStatisticError("mean_intra is undefined: no class has two or more examples")
    if not inter_mask.any():
        raise MissingStatisticError("mean_inter is undefined: fewer than two classes present")

    G = l2_normalize_rows(np.asarray(F, dtype=np.float64))
    per_class_intra = {}
    class_means = {}
    for c in np.unique(labels).tolist():
        members = labels == c
        block = intra_mask & members[:, None] & members[None, :]
        per_class_intra[c] = float(S[block].mean()) if block.any() else None
        class_means[c] = G[members].mean(axis=0)

    return SimilarityStats(
        mean_intra=float(S[intra_mask].mean()),
        mean_inter=float(S[inter_mask].mean()),
        per_class_intra=per_class_intra,
        class_means=class_means,
    )


def label_sorted_order(labels) -> np.ndarray:
    """Example order that keeps same-label examples adjacent, stable within a label."""
    return np.argsort(np.asarray(labels), kind="stable")


def export_heatmap(S, labels, path: str, example_ids=None) -> str:
    """
    Write S as CSV: a header of example ids grouped by label, then one row of
    similarities per example in the same order, at 9 significant digits.
    """
    S = np.asarray(S, dtype=np.float64)
    labels = np.asarray(labels)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise RejectedInputError(f"Similarity matrix must be square, got shape {S.shape}")
    if labels.shape != (S.shape[0],):
        raise RejectedInputError(f"Expected {S.shape[0]} labels, got shape {labels.shape}")
    if example_ids is None:
        example_ids = np.arange(len(labels))

    order = label_sorted_order(labels)
    df = pd.DataFrame(S[np.ix_(order, order)], columns=[str(example_ids[i]) for i in order])
    return write_csv(df, path, float_format="%.9g")


def read_heatmap(path: str) -> tuple[list[str], np.ndarray]:
    df = pd.read_csv(path, dtype=np.float64)
    return list(df.columns), df.to_numpy()


def export_curves(records, path: str) -> str:
    """One row per epoch per run with the loss components and test accuracy."""
    records = list(records)
    if not records:
        raise RejectedInputError("export_curves needs at least one metrics record")

    frames = []
    for record in records:
        df = pd.DataFrame.from_records(record.epochs)
        df.insert(0, "run_id", record.run_id)
        frames.append(df.reindex(columns=CURVE_COLUMNS))
    return write_csv(pd.concat(frames, ignore_index=True), path)
