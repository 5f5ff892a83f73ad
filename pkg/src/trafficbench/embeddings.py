"""Pooling of token embeddings into packet vectors, and k-NN label purity.

Embeddings are produced elsewhere and read from a line-oriented text format:

    EMB v1 <n> <d>
    <uid> <label> <v1> ... <vd>            (n lines)

    EMBM v1 <n> <d>
    <uid> <L> <d> [label]                  (then L rows of d floats, per packet)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10_000
# relative slack when gathering tie candidates before exact re-ranking
_SLACK = 1e-9


@dataclass
class EmbeddingMatrix:
    packet_uid: int
    H: np.ndarray  # L x d, row j = token j
    label: Hashable = None

    def __post_init__(self) -> None:
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.H.ndim != 2 or self.H.shape[0] < 1:
            raise ValueError(f"packet {self.packet_uid}: token matrix must be L x d with L >= 1")
        if not np.isfinite(self.H).all():
            raise ValueError(f"packet {self.packet_uid}: non-finite embedding values")

    @property
    def L(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]


@dataclass
class PooledEmbedding:
    packet_uid: int
    r: np.ndarray
    label: Hashable = None

    def __post_init__(self) -> None:
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.r.ndim != 1 or not np.isfinite(self.r).all():
            raise ValueError(f"packet {self.packet_uid}: pooled vector must be a finite 1-D array")


@dataclass
class EmbeddingSet:
    items: list[PooledEmbedding]
    d: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("empty embedding set")
        self.d = len(self.items[0].r)
        uids = set()
        for it in self.items:
            if len(it.r) != self.d:
                raise ValueError(f"packet {it.packet_uid}: dimension {len(it.r)} != {self.d}")
            if it.packet_uid in uids:
                raise ValueError(f"duplicate packet uid {it.packet_uid}")
            uids.add(it.packet_uid)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def classes(self) -> list:
        return sorted({it.label for it in self.items}, key=lambda c: (str(type(c)), c))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, list]:
        """(uids, vectors, labels) ordered by packet uid."""
        items = sorted(self.items, key=lambda it: it.packet_uid)
        return (np.array([it.packet_uid for it in items]), np.array([it.r for it in items]),
                [it.label for it in items])


# pooling

def pool_first(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if len(H) < 1:
        raise ValueError("need at least one token")
    return H[0].copy()


def pool_mean(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if len(H) < 1:
        raise ValueError("need at least one token")
    return _ordered_sum(H) / len(H)


def _ordered_sum(A: np.ndarray) -> np.ndarray:
    """Column sums taken in sorted order, so reordering the rows cannot change a single bit."""
    return np.sort(A, axis=0).sum(axis=0)


def pool_luong(H: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax(H q)-weighted average of the token rows; returns (r, weights)."""
    H = np.asarray(H, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if len(H) < 1:
        raise ValueError("need at least one token")
    if q.shape != (H.shape[1],) or not np.isfinite(q).all():
        raise ValueError("query must be a finite d-vector")
    s = (H * q).sum(axis=1)
    e = np.exp(s - s.max())
    w = e / _ordered_sum(e)
    return _ordered_sum(w[:, None] * H), w


POOLERS = ("first", "mean", "luong")


def pool(matrices: Iterable[EmbeddingMatrix], method: str = "mean", q: np.ndarray | None = None) -> EmbeddingSet:
    out = []
    for m in matrices:
        if method == "first":
            r = pool_first(m.H)
        elif method == "mean":
            r = pool_mean(m.H)
        elif method == "luong":
            if q is None:
                raise ValueError("luong pooling needs a query vector")
            r = pool_luong(m.H, q)[0]
        else:
            raise ValueError(f"unknown pooling {method!r}; choose from {POOLERS}")
        out.append(PooledEmbedding(m.packet_uid, r, m.label))
    return EmbeddingSet(out)


# purity

@dataclass
class PurityResult:
    k: int
    histogram: list[int]  # histogram[c] = points with c same-label neighbours
    mean: float
    counts: dict[int, int]  # packet uid -> same-label neighbour count
    method: str
    metric: str

    def share(self, c: int) -> float:
        return self.histogram[c] / sum(self.histogram)

    def to_dict(self) -> dict:
        n = sum(self.histogram)
        return {"k": self.k, "n": n, "histogram": self.histogram, "share": [h / n for h in self.histogram],
                "mean": self.mean, "method": self.method, "metric": self.metric}


def _exact_rank(X: np.ndarray, i: int, cand: np.ndarray, k: int) -> np.ndarray:
    """The k candidates nearest to row i by directly computed distance, ties to the lower index."""
    cand = cand[cand != i]
    d = ((X[cand] - X[i]) ** 2).sum(axis=1)
    order = np.lexsort((cand, d))
    return cand[order[:k]]


def _brute_neighbours(X: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    n = len(X)
    sq = (X * X).sum(axis=1)
    out = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, chunk):
        rows = np.arange(s, min(s + chunk, n))
        d = np.maximum(sq[rows, None] + sq[None, :] - 2.0 * X[rows] @ X.T, 0.0)
        d[np.arange(len(rows)), rows] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1]
        for r, i in enumerate(rows):
            # the expanded formula is only approximate, so widen the cut before exact re-ranking
            bound = kth[r] * (1 + _SLACK) + _SLACK * (sq[i] + sq.max()) + 1e-300
            out[i] = _exact_rank(X, i, np.flatnonzero(d[r] <= bound), k)
    return out


def _index_neighbours(X: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(X)
    dist, _ = tree.query(X, k=k + 1)
    out = np.empty((len(X), k), dtype=np.int64)
    for i in range(len(X)):
        # the k+1 nearest include the point itself; gather every point tied with the k-th
        radius = dist[i, k] * (1 + _SLACK) + 1e-300
        cand = np.array(tree.query_ball_point(X[i], radius), dtype=np.int64)
        out[i] = _exact_rank(X, i, cand, k)
    return out


def knn_purity(emb: EmbeddingSet, k: int = 5, metric: str = "euclidean", method: str = "auto") -> PurityResult:
    """For every point, how many of its k nearest other points share its label."""
    if len(emb) <= k:
        raise ValueError(f"need more than k={k} points, got {len(emb)}")
    uids, X, labels = emb.arrays()
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        if (norms == 0).any():
            raise ValueError("cosine metric undefined for zero vectors")
        X = X / norms[:, None]
    elif metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    if method == "auto":
        method = "brute" if len(X) <= BRUTE_FORCE_LIMIT else "index"
    if method == "brute":
        nb = _brute_neighbours(X, k)
    elif method == "index":
        nb = _index_neighbours(X, k)
    else:
        raise ValueError(f"unknown method {method!r}")
    lab = np.array([str(type(v)) + repr(v) for v in labels])
    same = (lab[nb] == lab[:, None]).sum(axis=1)
    hist = np.bincount(same, minlength=k + 1)
    return PurityResult(k, hist.tolist(), float(same.mean()), dict(zip(uids.tolist(), same.tolist())), method, metric)


# file formats

def _floats(tokens: Sequence[str], where: str) -> np.ndarray:
    try:
        v = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as e:
        raise ValueError(f"{where}: {e}") from None
    if not np.isfinite(v).all():
        raise ValueError(f"{where}: non-finite value")
    return v


def _label_token(label: Hashable) -> str:
    s = str(label)
    if not s or any(c.isspace() for c in s):
        raise ValueError(f"label {label!r} must be non-empty without whitespace")
    return s


def write_emb(path: str | Path, emb: EmbeddingSet) -> None:
    with open(path, "w") as fh:
        fh.write(f"EMB v1 {len(emb)} {emb.d}\n")
        for it in emb.items:
            fh.write(f"{it.packet_uid} {_label_token(it.label)} " + " ".join(repr(float(v)) for v in it.r) + "\n")


def read_emb(path: str | Path) -> EmbeddingSet:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[:2] != ["EMB", "v1"]:
        raise ValueError(f"{path}: expected header 'EMB v1 n d'")
    n, d = int(head[2]), int(head[3])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(body)}")
    items = []
    for lineno, ln in enumerate(body, start=2):
        tok = ln.split()
        if len(tok) != d + 2:
            raise ValueError(f"{path}:{lineno}: expected {d} values, found {len(tok) - 2}")
        items.append(PooledEmbedding(int(tok[0]), _floats(tok[2:], f"{path}:{lineno}"), tok[1]))
    return EmbeddingSet(items)


def write_embm(path: str | Path, matrices: Sequence[EmbeddingMatrix]) -> None:
    if not matrices:
        raise ValueError("nothing to write")
    d = matrices[0].d
    with open(path, "w") as fh:
        fh.write(f"EMBM v1 {len(matrices)} {d}\n")
        for m in matrices:
            if m.d != d:
                raise ValueError(f"packet {m.packet_uid}: dimension {m.d} != {d}")
            label = "" if m.label is None else " " + _label_token(m.label)
            fh.write(f"{m.packet_uid} {m.L} {d}{label}\n")
            for row in m.H:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_embm(path: str | Path) -> list[EmbeddingMatrix]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[:2] != ["EMBM", "v1"]:
        raise ValueError(f"{path}: expected header 'EMBM v1 n d'")
    n, d = int(head[2]), int(head[3])
    out, pos = [], 1
    for _ in range(n):
        if pos >= len(lines):
            raise ValueError(f"{path}: expected {n} blocks, file ended after {len(out)}")
        tok = lines[pos].split()
        if len(tok) not in (3, 4):
            raise ValueError(f"{path}:{pos + 1}: expected block header 'uid L d [label]'")
        uid, L, bd = int(tok[0]), int(tok[1]), int(tok[2])
        if bd != d:
            raise ValueError(f"{path}:{pos + 1}: block dimension {bd} != {d}")
        if L < 1 or pos + 1 + L > len(lines):
            raise ValueError(f"{path}:{pos + 1}: block of {L} rows is empty or truncated")
        rows = []
        for j in range(L):
            vals = lines[pos + 1 + j].split()
            if len(vals) != d:
                raise ValueError(f"{path}:{pos + 2 + j}: expected {d} values, found {len(vals)}")
            rows.append(_floats(vals, f"{path}:{pos + 2 + j}"))
        out.append(EmbeddingMatrix(uid, np.array(rows), tok[3] if len(tok) == 4 else None))
        pos += 1 + L
    if pos != len(lines):
        raise ValueError(f"{path}: trailing data after {n} blocks")
    return out


def read_any(path: str | Path, method: str = "mean", q: np.ndarray | None = None) -> EmbeddingSet:
    """Read either format; token matrices are pooled with ``method``."""
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("EMBM"):
        return pool(read_embm(path), method, q)
    return read_emb(path)
