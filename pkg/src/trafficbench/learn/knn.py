"""Brute-force Euclidean k-nearest-neighbour classifier."""

from __future__ import annotations

import logging
from typing import Hashable, Sequence

import numpy as np

log = logging.getLogger(__name__)


def squared_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at 0 against rounding."""
    d = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def nearest(train: np.ndarray, query: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of the k nearest training rows per query, nearest first, ties to the lower index."""
    out = np.empty((len(query), k), dtype=np.int64)
    for s in range(0, len(query), chunk):
        d = squared_distances(query[s:s + chunk], train)
        # stable sort keeps the lower index first among equal distances
        part = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[s:s + chunk] = part
    return out


def knn_classify(train_X: np.ndarray, train_y: Sequence[Hashable], query_X: np.ndarray, k: int = 5) -> list:
    """Majority label among the k nearest; ties go to the tied class of the nearest neighbour."""
    if k < 1:
        raise ValueError("k must be >= 1")
    train_X = np.asarray(train_X, dtype=np.float64)
    query_X = np.asarray(query_X, dtype=np.float64)
    if k > len(train_X):
        log.warning("k=%d exceeds %d training points; clamped", k, len(train_X))
        k = len(train_X)
    labels = list(train_y)
    idx = nearest(train_X, query_X, k)
    out = []
    for row in idx:
        votes: dict[Hashable, int] = {}
        for j in row:
            votes[labels[j]] = votes.get(labels[j], 0) + 1
        best = max(votes.values())
        # first neighbour (nearest) whose class is among the tied winners
        out.append(next(labels[j] for j in row if votes[labels[j]] == best))
    return out
