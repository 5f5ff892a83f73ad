import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trafficbench.learn import (
    EvalResult,
    ForestModel,
    ForestParams,
    accuracy,
    confusion_matrix,
    flow_majority_vote,
    flow_predictions,
    knn_classify,
    macro_f1,
    mean_std,
    train_forest,
)
from trafficbench.learn.forest import LEAF, _best_split, gini
from trafficbench.learn.knn import nearest


def brute_best_gain(X, y, n_classes):
    """Largest weighted Gini decrease over every (column, cut) pair, by direct enumeration."""
    n = len(y)
    parent = gini(np.bincount(y, minlength=n_classes).astype(float))
    best = None
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            mask = X[:, j] <= (a + b) / 2
            cl = np.bincount(y[mask], minlength=n_classes).astype(float)
            cr = np.bincount(y[~mask], minlength=n_classes).astype(float)
            gain = parent - (mask.sum() * gini(cl) + (~mask).sum() * gini(cr)) / n
            if best is None or gain > best + 1e-12:
                best = gain
    return best


@given(hnp.arrays(np.int64, st.tuples(st.integers(2, 30), st.integers(1, 4)), elements=st.integers(0, 5)),
       st.data())
def test_best_split_matches_brute_force(X, data):
    y = np.array(data.draw(st.lists(st.integers(0, 2), min_size=len(X), max_size=len(X))))
    X = X.astype(float)
    found = _best_split(X, y, 3)
    expected = brute_best_gain(X, y, 3)
    if expected is None:
        assert found is None
        return
    col, thr, _ = found
    mask = X[:, col] <= thr
    n = len(y)
    gain = gini(np.bincount(y, minlength=3).astype(float)) - (
        mask.sum() * gini(np.bincount(y[mask], minlength=3).astype(float))
        + (~mask).sum() * gini(np.bincount(y[~mask], minlength=3).astype(float))) / n
    assert 0 < mask.sum() < n
    assert gain == pytest.approx(expected, abs=1e-9)


def test_xor_learned():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, size=(400, 2)).astype(float)
    y = (X[:, 0] != X[:, 1]).astype(int)
    m = train_forest(X, y, ForestParams(n_trees=10, max_features=None, seed=1))
    assert accuracy(list(y), m.predict(X)) == 1.0


def test_fully_grown_tree_fits_training_set():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 5))
    y = rng.integers(0, 4, 200)
    m = train_forest(X, y, ForestParams(n_trees=1, bootstrap=False, max_features=None))
    assert m.predict(X) == list(y)
    t = m.trees[0]
    leaves = t.feature == LEAF
    assert np.all(t.impurity[leaves] == 0)


def test_contradictory_labels_make_impure_leaf():
    X = np.zeros((6, 2))
    y = ["a", "b", "a", "b", "a", "a"]
    m = train_forest(X, y, ForestParams(n_trees=1, bootstrap=False))
    assert m.trees[0].n_nodes == 1
    assert m.predict(X[:1]) == ["a"]
    assert m.predict_proba(X[:1])[0] == pytest.approx([4 / 6, 2 / 6])


def test_max_depth_respected():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 4))
    y = rng.integers(0, 3, 300)
    m = train_forest(X, y, ForestParams(n_trees=3, max_depth=2, seed=0))
    for t in m.trees:
        assert t.n_nodes <= 7


def test_importance_on_informative_feature():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 6))
    y = (X[:, 4] > 0).astype(int)
    m = train_forest(X, y, ForestParams(n_trees=20, seed=0))
    imp = m.feature_importance()
    assert imp.sum() == pytest.approx(1.0)
    assert int(np.argmax(imp)) == 4 and imp[4] > 0.5


def test_importance_hand_computed():
    # one split: x<=0.5 gives pure [2,0] and [0,2]; root gini 0.5 -> decrease 0.5 all on feature 1
    X = np.array([[7, 0], [7, 0], [7, 1], [7, 1]], dtype=float)
    m = train_forest(X, [0, 0, 1, 1], ForestParams(n_trees=1, bootstrap=False, max_features=None))
    from trafficbench.learn.forest import tree_importance
    assert tree_importance(m.trees[0], 2) == pytest.approx([0.0, 0.5])
    assert m.feature_importance() == pytest.approx([0.0, 1.0])


def test_constant_columns_never_split():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.full(100, 3.0), rng.normal(size=100), np.zeros(100)])
    y = (X[:, 1] > 0).astype(int)
    m = train_forest(X, y, ForestParams(n_trees=5, seed=0))
    used = {int(f) for t in m.trees for f in t.feature if f != LEAF}
    assert used == {1}
    assert m.feature_importance()[[0, 2]].sum() == 0


def test_determinism_and_seed_sensitivity():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 8))
    y = rng.integers(0, 3, 200)
    a = train_forest(X, y, ForestParams(n_trees=5, seed=7))
    b = train_forest(X, y, ForestParams(n_trees=5, seed=7))
    c = train_forest(X, y, ForestParams(n_trees=5, seed=8))
    assert a.to_json() == b.to_json()
    assert a.to_json() != c.to_json()


def test_json_round_trip_and_version():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(80, 3))
    y = [str(v) for v in rng.integers(0, 3, 80)]
    m = train_forest(X, y, ForestParams(n_trees=4), feature_names=["a", "b", "c"], schema_fingerprint="abc")
    m2 = ForestModel.from_json(m.to_json())
    assert m2.predict(X) == m.predict(X) and m2.feature_names == ["a", "b", "c"] and m2.schema_fingerprint == "abc"
    with pytest.raises(ValueError):
        ForestModel.from_json(m.to_json().replace("trafficbench-forest/1", "other/9"))
    with pytest.raises(ValueError):
        m.predict(X[:, :2])


def test_hard_vote_differs_from_soft():
    # three trees vote a, a, b but b's probability mass is larger on average
    from trafficbench.learn.forest import Tree
    def stump(p):
        return Tree(np.array([LEAF]), np.zeros(1), np.array([LEAF]), np.array([LEAF]), np.array([p]),
                    np.array([10.0]), np.zeros(1))
    trees = [stump([0.51, 0.49]), stump([0.51, 0.49]), stump([0.0, 1.0])]
    m = ForestModel(trees, ["a", "b"], 1, ForestParams(n_trees=3))
    assert m.predict(np.zeros((1, 1))) == ["a"]
    assert m.predict_proba(np.zeros((1, 1)))[0, 1] > 0.5


def test_max_features_resolution():
    assert ForestParams().features_per_split(80) == 8
    assert ForestParams(max_features=None).features_per_split(80) == 80
    assert ForestParams(max_features=200).features_per_split(80) == 80


# metrics

def test_confusion_and_macro_f1_hand_values():
    y_true = ["a", "a", "a", "b", "b", "c"]
    y_pred = ["a", "a", "b", "b", "c", "c"]
    cm, cls = confusion_matrix(y_true, y_pred)
    assert cls == ["a", "b", "c"]
    assert cm.tolist() == [[2, 1, 0], [0, 1, 1], [0, 0, 1]]
    # per-class f1: a 2*1*(2/3)/(5/3)=0.8, b 0.5, c 2*0.5*1/1.5=2/3
    assert macro_f1(y_true, y_pred) == pytest.approx((0.8 + 0.5 + 2 / 3) / 3)
    assert accuracy(y_true, y_pred) == pytest.approx(4 / 6)


def test_macro_f1_absent_class_counts_zero():
    assert macro_f1(["a", "a"], ["a", "a"], classes=["a", "b"]) == pytest.approx(0.5)
    assert macro_f1(["a", "a"], ["a", "a"]) == 1.0


def test_eval_result_and_csv(tmp_path):
    r = EvalResult.from_predictions([0, 1, 1], [0, 1, 0])
    assert r.accuracy == pytest.approx(2 / 3)
    assert r.per_class["1"]["recall"] == 0.5 and r.per_class["0"]["precision"] == 0.5
    r.write_confusion_csv(tmp_path / "cm.csv")
    assert (tmp_path / "cm.csv").read_text().splitlines()[1] == "0,1,0"
    assert mean_std([1.0, 3.0]) == {"mean": 2.0, "std": 1.0, "n": 2}


# k-NN

@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 25), st.just(3)), elements=st.integers(-5, 5).map(float)),
       hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.just(3)), elements=st.integers(-5, 5).map(float)),
       st.integers(1, 6))
def test_nearest_matches_brute_force(train, query, k):
    k = min(k, len(train))
    got = nearest(train, query, k)
    for q, row in zip(query, got):
        d = [float(((q - t) ** 2).sum()) for t in train]
        expected = sorted(range(len(train)), key=lambda i: (d[i], i))[:k]
        assert list(row) == expected


def test_knn_tie_goes_to_nearest_class():
    train = np.array([[0.0], [1.0], [-1.5], [3.0]])
    # k=4 gives a 2/2 tie between "x" (at 0 and 3) and "y" (at 1 and -1.5); nearest to 0.1 is "x"
    assert knn_classify(train, ["x", "y", "y", "x"], np.array([[0.1]]), k=4) == ["x"]
    assert knn_classify(train, ["x", "y", "y", "x"], np.array([[0.9]]), k=4) == ["y"]


def test_knn_clamps_k(caplog):
    with caplog.at_level(logging.WARNING):
        out = knn_classify(np.array([[0.0], [1.0]]), ["a", "a"], np.array([[5.0]]), k=10)
    assert out == ["a"] and "clamped" in caplog.text
    with pytest.raises(ValueError):
        knn_classify(np.zeros((2, 1)), ["a", "b"], np.zeros((1, 1)), k=0)


# flow vote

def test_vote_uses_first_n():
    assert flow_majority_vote(["a", "b", "b", "a", "a", "b", "b", "b"], n=5) == "a"
    assert flow_majority_vote(["b", "b"], n=5) == "b"


def test_vote_tie_breaks():
    proba = np.array([[0.9, 0.1], [0.4, 0.6]])
    assert flow_majority_vote(["a", "b"], proba, ["a", "b"]) == "a"
    proba = np.array([[0.6, 0.4], [0.1, 0.9]])
    assert flow_majority_vote(["a", "b"], proba, ["a", "b"]) == "b"
    assert flow_majority_vote(["b", "a"], None, ["a", "b"]) == "a"
    with pytest.raises(ValueError):
        flow_majority_vote([])


def test_flow_predictions_respects_order():
    flow_of = {1: 10, 2: 10, 3: 10, 4: 20}
    pred = {1: "x", 2: "y", 3: "y", 4: "z"}
    assert flow_predictions(flow_of, [3, 2, 1, 4], pred, n=1) == {10: "y", 20: "z"}
    assert flow_predictions(flow_of, [1, 2, 3, 4], pred, n=1) == {10: "x", 20: "z"}
