"""Random forest of CART trees with Gini impurity, written against numpy only.

Split search is exhaustive over the sorted values of each candidate feature,
vectorized per node: class counts to the left of every cut come from one
cumulative sum, and the Gini decrease is maximized through the equivalent
score sum(cl^2)/nl + sum(cr^2)/nr.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np

from ..seeding import stream

MODEL_VERSION = "trafficbench-forest/1"
LEAF = -1


@dataclass
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    max_features: int | str | None = "sqrt"  # "sqrt", an int, or None for all
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def features_per_split(self, width: int) -> int:
        if self.max_features is None:
            return width
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(width)))
        return max(1, min(int(self.max_features), width))


@dataclass
class Tree:
    feature: np.ndarray  # int, LEAF for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes) class counts
    n_samples: np.ndarray  # (n_nodes,) sample count (bootstrap multiplicity included)
    impurity: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index for every row."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            active = feat != LEAF
            if not active.any():
                return node
            r, n = rows[active], node[active]
            go_left = X[r, feat[active]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        v = self.value[self.apply(X)]
        return v / v.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.astype(np.int64).tolist(),
            "n_samples": self.n_samples.astype(np.int64).tolist(),
            "impurity": self.impurity.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=np.float64).reshape(len(d["feature"]), -1),
                   np.array(d["n_samples"], dtype=np.float64), np.array(d["impurity"], dtype=np.float64))


def gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.dot(p, p))


def _best_split(Xn: np.ndarray, yn: np.ndarray, n_classes: int) -> tuple[int, float, float] | None:
    """Best (column, threshold, score) over the columns of ``Xn``; None if no cut exists."""
    return _best_split_rows(np.ascontiguousarray(Xn.T), yn, n_classes)


def _best_split_rows(XT: np.ndarray, yn: np.ndarray, n_classes: int) -> tuple[int, float, float] | None:
    """Split search over a (features, samples) block, one candidate feature per row.

    score = sum(cl^2)/nl + sum(cr^2)/nr, larger is better. Ties keep the
    earliest column and the leftmost cut.

    Class counts are never materialized: walking a sorted column, the left sum
    of squares grows by 2*r + 1 where r is how many earlier elements share the
    current element's class, and sum(cr^2) = sum(total^2) - 2*sum(total*cl) + sum(cl^2).
    """
    m, n = XT.shape
    # rows keep every sort and scan on contiguous memory; gathers go through flat
    # offsets, which numpy serves much faster than 2-D fancy indexing
    off = (np.arange(m) * n)[:, None]
    # the score at a cut between distinct values depends only on which elements lie left
    # of it, so the value sort need not be stable
    order = np.argsort(XT, axis=1)
    xs = XT.take(order + off)
    # cuts between distinct neighbouring values, as flat (row, position) indices
    cut = np.flatnonzero(xs[:, 1:] > xs[:, :-1])
    if len(cut) == 0:
        return None
    key_type = np.int16 if n_classes < 2**15 else np.int64  # small ints get numpy's radix sort
    ys = yn.astype(key_type).take(order)  # (m, n)
    total = np.bincount(yn, minlength=n_classes)
    start = np.cumsum(total) - total
    # position of each element when a row is re-sorted stably by class
    by_class = np.argsort(ys, axis=1, kind="stable")
    inv = np.empty(m * n, dtype=np.int64)
    np.put(inv, by_class + off, np.arange(n))  # values repeat once per row
    rank = inv.reshape(m, n) - start.take(ys)
    row, pos = np.divmod(cut, n - 1)
    at = row * n + pos  # last element left of each cut
    sl = np.cumsum(2 * rank + 1, axis=1).take(at).astype(np.float64)
    tl = np.cumsum(total.take(ys), axis=1).take(at).astype(np.float64)
    sr = float(np.dot(total, total)) - 2.0 * tl + sl
    nl = pos + 1.0
    score = sl / nl + sr / (n - nl)
    best = int(np.argmax(score))  # cuts are in row-major order: earliest column, then leftmost cut win ties
    col, pos = int(row[best]), int(pos[best])
    thr = (xs[col, pos] + xs[col, pos + 1]) / 2.0
    if thr >= xs[col, pos + 1]:  # midpoint rounded up onto the right value
        thr = xs[col, pos]
    return col, float(thr), float(score[best])


def build_tree(X: np.ndarray, y: np.ndarray, n_classes: int, params: ForestParams,
               rng: np.random.Generator, sample: np.ndarray | None = None, k: int | None = None) -> Tree:
    """Grow one CART tree on rows ``sample`` (with repeats, for bootstrap) of X.

    ``k`` overrides the number of candidate features per split (used when X
    has been narrowed to its non-constant columns).
    """
    if k is None:
        k = params.features_per_split(X.shape[1])
    max_depth = params.max_depth if params.max_depth is not None else 10**9
    idx0 = np.arange(len(X)) if sample is None else sample
    XT = np.ascontiguousarray(X.T)
    feature, threshold, left, right, value, n_samples, impurity = [], [], [], [], [], [], []

    def new_node(counts: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(counts)
        n_samples.append(counts.sum())
        impurity.append(gini(counts))
        return len(feature) - 1

    root = new_node(np.bincount(y[idx0], minlength=n_classes).astype(np.float64))
    stack = [(root, idx0, 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = value[node]
        if depth >= max_depth or len(idx) < params.min_samples_split or np.count_nonzero(counts) <= 1:
            continue
        Xi = XT.take(idx, axis=1)
        # features constant in this node never count toward the k draws
        varying = np.flatnonzero(Xi.max(axis=1) > Xi.min(axis=1))
        if len(varying) == 0:
            continue
        cand = rng.permutation(varying)[:k]
        found = _best_split_rows(Xi.take(cand, axis=0), y.take(idx), n_classes)
        if found is None:
            continue
        col, thr, _ = found
        f = int(cand[col])
        go_left = Xi[f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        lc = np.bincount(y[li], minlength=n_classes).astype(np.float64)
        rc = counts - lc
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(lc)
        right[node] = new_node(rc)
        # depth-first, left child on top of the stack
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value, dtype=np.float64).reshape(len(feature), n_classes),
                np.array(n_samples, dtype=np.float64), np.array(impurity, dtype=np.float64))


def tree_importance(tree: Tree, width: int) -> np.ndarray:
    """Sample-weighted Gini decrease per feature, divided by the root sample count."""
    imp = np.zeros(width)
    for i in np.flatnonzero(tree.feature != LEAF):
        l, r = tree.left[i], tree.right[i]
        dec = (tree.n_samples[i] * tree.impurity[i] - tree.n_samples[l] * tree.impurity[l]
               - tree.n_samples[r] * tree.impurity[r])
        imp[tree.feature[i]] += dec
    return imp / tree.n_samples[0]


@dataclass
class ForestModel:
    trees: list[Tree]
    classes: list
    n_features: int
    params: ForestParams
    feature_names: list[str] | None = None
    schema_fingerprint: str | None = None
    version: str = field(default=MODEL_VERSION)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        return sum(t.predict_proba(X) for t in self.trees) / len(self.trees)

    def predict_index(self, X: np.ndarray) -> np.ndarray:
        """Hard majority vote over trees; ties go to higher mean probability, then lower class index."""
        X = self._check(X)
        votes = np.zeros((len(X), len(self.classes)))
        proba = np.zeros((len(X), len(self.classes)))
        rows = np.arange(len(X))
        for t in self.trees:
            p = t.predict_proba(X)
            proba += p
            votes[rows, np.argmax(p, axis=1)] += 1
        top = votes == votes.max(axis=1, keepdims=True)
        return np.argmax(np.where(top, proba, -1.0), axis=1)

    def predict(self, X: np.ndarray) -> list:
        return [self.classes[i] for i in self.predict_index(X)]

    def feature_importance(self) -> np.ndarray:
        """Mean decrease in impurity, normalized to sum to 1 (all zeros if no split exists)."""
        per_tree = [tree_importance(t, self.n_features) for t in self.trees]
        imp = np.mean(per_tree, axis=0)
        total = imp.sum()
        return imp / total if total > 0 else imp

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "params": asdict(self.params),
            "classes": self.classes,
            "n_features": self.n_features,
            "feature_names": self.feature_names,
            "schema_fingerprint": self.schema_fingerprint,
            "trees": [t.to_dict() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> ForestModel:
        d = json.loads(text)
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        return cls([Tree.from_dict(t) for t in d["trees"]], d["classes"], d["n_features"],
                   ForestParams(**d["params"]), d.get("feature_names"), d.get("schema_fingerprint"))


def encode_labels(y: Sequence[Hashable], classes: Sequence | None = None) -> tuple[np.ndarray, list]:
    # numpy scalars become plain Python values so models serialize to JSON
    y = [v.item() if isinstance(v, np.generic) else v for v in y]
    if classes is None:
        classes = sorted(set(y), key=lambda c: (str(type(c)), c))
    classes = [c.item() if isinstance(c, np.generic) else c for c in classes]
    pos = {c: i for i, c in enumerate(classes)}
    return np.array([pos[v] for v in y], dtype=np.int64), list(classes)


def train_forest(X: np.ndarray, y: Sequence[Hashable], params: ForestParams | None = None,
                 feature_names: Sequence[str] | None = None, schema_fingerprint: str | None = None,
                 classes: Sequence | None = None) -> ForestModel:
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise ValueError("X must be 2-D with one row per label and at least one row")
    yi, classes = encode_labels(list(y), classes)
    k = params.features_per_split(X.shape[1])
    # columns constant over all of X can never split; dropping them leaves every draw unchanged
    cols = np.flatnonzero(X.max(axis=0) > X.min(axis=0)) if len(X) else np.arange(X.shape[1])
    Xs = np.ascontiguousarray(X[:, cols])
    trees = []
    for t in range(params.n_trees):
        rng = stream(params.seed, "tree", t)
        sample = rng.integers(0, len(X), size=len(X)) if params.bootstrap else None
        tree = build_tree(Xs, yi, len(classes), params, rng, sample, k)
        inner = tree.feature != LEAF
        tree.feature[inner] = cols[tree.feature[inner]]
        trees.append(tree)
    return ForestModel(trees, classes, X.shape[1], params,
                       list(feature_names) if feature_names is not None else None, schema_fingerprint)
