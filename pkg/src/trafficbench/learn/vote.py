"""Flow-level labels from packet-level predictions."""

from __future__ import annotations

from typing import Hashable, Mapping, Sequence

import numpy as np

FIRST_N = 5


def flow_majority_vote(predictions: Sequence[Hashable], proba: np.ndarray | None = None,
                       classes: Sequence | None = None, n: int = FIRST_N) -> Hashable:
    """Most frequent label among the first ``n`` packet predictions.

    Flows shorter than ``n`` use every packet they have. Ties go to the label
    with the highest probability summed over those packets, then to the lowest
    class index (position in ``classes``, or sorted order).
    """
    if len(predictions) == 0:
        raise ValueError("need at least one prediction")
    preds = list(predictions)[:n]
    if classes is None:
        classes = sorted(set(preds), key=lambda c: (str(type(c)), c))
    pos = {c: i for i, c in enumerate(classes)}
    counts: dict[Hashable, int] = {}
    for p in preds:
        counts[p] = counts.get(p, 0) + 1
    best = max(counts.values())
    tied = [c for c in counts if counts[c] == best]
    if len(tied) == 1:
        return tied[0]
    if proba is not None:
        sums = np.asarray(proba, dtype=np.float64)[:len(preds)].sum(axis=0)
        top = max(sums[pos[c]] for c in tied)
        tied = [c for c in tied if sums[pos[c]] == top]
    return min(tied, key=lambda c: pos[c])


def flow_predictions(flow_of: Mapping[int, int], order: Sequence[int], pred: Mapping[int, Hashable],
                     proba: Mapping[int, np.ndarray] | None = None, classes: Sequence | None = None,
                     n: int = FIRST_N) -> dict[int, Hashable]:
    """Vote per flow over packets listed in capture ``order`` (packet uids)."""
    members: dict[int, list[int]] = {}
    for uid in order:
        if uid in pred:
            members.setdefault(flow_of[uid], []).append(uid)
    out = {}
    for fuid, uids in members.items():
        p = np.array([proba[u] for u in uids[:n]]) if proba is not None else None
        out[fuid] = flow_majority_vote([pred[u] for u in uids], p, classes, n)
    return out
