import json

import numpy as np
import pytest

from latsys import forest as rf
from latsys.core_types import InputDomainError
from latsys.harness import make_folds

from oracles import exhaustive_tree, gaussian_blobs, xor_blobs


def leaf_tree(label, n_classes=3):
    tree = rf.DecisionTree(n_classes)
    counts = np.zeros(n_classes, dtype=int)
    counts[label] = 1
    tree._add(counts)
    return tree


def cv_accuracy(X, y, params, k=5, seed=0):
    ids = [str(i) for i in range(len(y))]
    plan = make_folds(ids, y, k, seed)
    correct = 0
    for f in range(k):
        test = np.array([int(i) for i in plan.test(f)])
        train = np.array([int(i) for i in plan.train(f)])
        forest = rf.fit(X[train], y[train], params)
        correct += int((forest.predict(X[test]) == y[test]).sum())
    return correct / len(y)


def test_single_class_data_gives_single_leaves():
    X = np.random.default_rng(0).random((30, 3))
    forest = rf.fit(X, np.full(30, 2), rf.ForestParams(n_trees=5), n_classes=4)
    assert all(len(t.feature) == 1 for t in forest.trees)
    np.testing.assert_array_equal(rf.predict_proba(forest, X[0]), [0, 0, 1, 0])


def test_vote_fraction_oracle():
    trees = [leaf_tree(2)] * 7 + [leaf_tree(0)] * 3
    forest = rf.Forest(rf.ForestParams(n_trees=10), 3, 2, trees,
                       [np.ones(4, dtype=int)] * 10)
    np.testing.assert_allclose(rf.predict_proba(forest, [0.0, 0.0]), [0.3, 0, 0.7])


def test_argmax_equals_plurality_of_tree_votes():
    X, y = gaussian_blobs(300, n_classes=4, sep=1.0, seed=1)
    forest = rf.fit(X, y, rf.ForestParams(n_trees=15, seed=3))
    Xq = np.random.default_rng(2).normal(0, 3, (200, X.shape[1]))
    votes = np.stack([t.predict(Xq) for t in forest.trees])
    plurality = [int(np.argmax(np.bincount(v, minlength=4))) for v in votes.T]
    assert forest.predict(Xq).tolist() == plurality


def test_same_seed_same_forest():
    X, y = gaussian_blobs(200, seed=4)
    a = rf.fit(X, y, rf.ForestParams(n_trees=10, seed=7))
    b = rf.fit(X, y, rf.ForestParams(n_trees=10, seed=7))
    c = rf.fit(X, y, rf.ForestParams(n_trees=10, seed=8))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert json.dumps(a.to_dict()) != json.dumps(c.to_dict())


def test_single_tree_with_all_features_matches_exhaustive_oracle():
    X, y = xor_blobs(200, seed=5)
    params = rf.ForestParams(n_trees=1, max_features=2)
    tree = rf.grow_tree(X, y, 2, params, np.random.default_rng(0))
    oracle = exhaustive_tree(X, y, 2)
    Xq = np.random.default_rng(6).uniform(-0.5, 1.5, (500, 2))
    assert tree.predict(Xq).tolist() == [oracle(x) for x in Xq]


def test_xor_blobs():
    X, y = xor_blobs(200, seed=0)
    oracle = exhaustive_tree(X, y, 2)
    assert np.mean([oracle(x) == t for x, t in zip(X, y)]) == 1.0
    forest = rf.fit(X, y, rf.ForestParams(seed=0))
    assert (forest.predict(X) == y).mean() == 1.0
    assert cv_accuracy(X, y, rf.ForestParams(seed=0)) >= 0.90


def test_ties_go_to_smallest_feature_then_threshold():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    y = np.array([0, 0, 1, 1])
    tree = rf.grow_tree(X, y, 2, rf.ForestParams(max_features=2),
                        np.random.default_rng(0), debug=True)
    assert (tree.feature[0], tree.threshold[0]) == (0, 1.5)
    gains = {c[0]: c[2] for c in tree.split_log[0].candidates}
    assert gains[0] == gains[1]


def test_constant_features_make_a_leaf():
    X = np.ones((10, 3))
    y = np.array([0, 1] * 5)
    forest = rf.fit(X, y, rf.ForestParams(n_trees=3))
    assert all(len(t.feature) == 1 for t in forest.trees)


def test_adjacent_float_threshold_still_separates():
    lo = 1.0
    hi = np.nextafter(lo, 2.0)
    X = np.array([[lo], [hi]] * 3)
    y = np.array([0, 1] * 3)
    tree = rf.grow_tree(X, y, 2, rf.ForestParams(max_features=1), np.random.default_rng(0))
    assert tree.predict(X).tolist() == y.tolist()


def test_oob_single_tree_is_out_of_bootstrap_set():
    X, y = gaussian_blobs(100, seed=2)
    forest = rf.fit(X, y, rf.ForestParams(n_trees=1, seed=9))
    drawn = rf.tree_rng(9, 0).integers(0, 100, size=100)
    expected = np.ones(100, bool)
    expected[drawn] = False
    np.testing.assert_array_equal(forest.oob_masks()[0], expected)
    result = rf.oob_score(forest, X, y)
    assert result.n_scored == expected.sum()


def test_oob_fraction_near_e_inverse():
    n = 500
    X, y = gaussian_blobs(n, seed=3)
    forest = rf.fit(X, y, rf.ForestParams(n_trees=50, seed=1))
    fraction = forest.oob_masks().mean()
    assert abs(fraction - (1 - 1 / n) ** n) <= 0.05
    assert abs(fraction - np.exp(-1)) <= 0.05


def test_oob_accuracy_tracks_cv_accuracy():
    X, y = gaussian_blobs(500, n_classes=3, sep=1.2, seed=11)
    params = rf.ForestParams(n_trees=60, seed=2)
    oob = rf.oob_score(rf.fit(X, y, params), X, y).score
    cv = cv_accuracy(X, y, params)
    assert abs(oob - cv) <= 0.10


def test_round_trip_and_save(tmp_path):
    X, y = gaussian_blobs(80, seed=5)
    forest = rf.fit(X, y, rf.ForestParams(n_trees=4, seed=5))
    forest.save(tmp_path / "f.json")
    again = rf.Forest.load(tmp_path / "f.json")
    np.testing.assert_array_equal(again.predict_proba(X), forest.predict_proba(X))
    assert again.params == forest.params
    bad = forest.to_dict()
    bad["version"] = 99
    with pytest.raises(InputDomainError):
        rf.Forest.from_dict(bad)


def test_input_validation():
    with pytest.raises(InputDomainError):
        rf.fit(np.empty((0, 2)), np.empty(0))
    forest = rf.fit(np.random.default_rng(0).random((10, 3)), np.arange(10) % 2,
                    rf.ForestParams(n_trees=2))
    with pytest.raises(InputDomainError):
        forest.predict(np.zeros((1, 4)))
    with pytest.raises(InputDomainError):
        rf.ForestParams(n_trees=0)
    with pytest.raises(InputDomainError):
        rf.ForestParams(max_features=5).features_per_split(3)


def test_default_features_per_split():
    assert rf.ForestParams().features_per_split(177) == 14
    assert rf.ForestParams().features_per_split(2) == 2


def test_gini():
    np.testing.assert_allclose(rf.gini(np.array([[5, 5], [10, 0], [0, 0]])), [0.5, 0, 0])
