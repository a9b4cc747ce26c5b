import json

import numpy as np
import pytest

from huclab import BoostConfig, feature_importance, project_top_d, train_gbdt
from huclab.dimreduce import forest_from_dict, forest_to_dict, predict


def separable_dataset(n=200, noise_features=5, classes=3, seed=0):
    """Labels are a pure threshold function of feature 0; the rest is noise."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1 + noise_features))
    edges = np.quantile(x[:, 0], np.linspace(0, 1, classes + 1)[1:-1])
    y = np.digitize(x[:, 0], edges)
    return x, y


def _walk(node):
    yield node
    if node.feature is not None:
        yield from _walk(node.left)
        yield from _walk(node.right)


class TestTrainGbdt:
    def test_constant_features_give_leaf_only_trees(self):
        x = np.ones((30, 4))
        y = np.array([0, 1] * 15)
        forest = train_gbdt(x, y, BoostConfig(rounds=3))
        for trees in forest.trees.values():
            for tree in trees:
                assert tree.is_leaf

    def test_separable_first_round_splits_on_informative_feature(self):
        x, y = separable_dataset(seed=1)
        forest = train_gbdt(x, y, BoostConfig(rounds=1, max_depth=2))
        for c in forest.classes:
            root = forest.trees[c][0]
            assert root.feature == 0

    def test_loss_decreases_monotonically(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((60, 4))
        y = rng.integers(0, 3, size=60)
        forest = train_gbdt(x, y, BoostConfig(rounds=10, max_depth=2, learning_rate=0.3))
        hist = forest.train_loss_history
        assert all(b < a for a, b in zip(hist, hist[1:]))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            train_gbdt(np.zeros((5, 2)), np.zeros(5, dtype=int), BoostConfig())

    def test_gains_nonnegative_and_child_counts_sum(self):
        x, y = separable_dataset(n=150, seed=3)
        forest = train_gbdt(x, y, BoostConfig(rounds=4, max_depth=3))
        for trees in forest.trees.values():
            for tree in trees:
                for node in _walk(tree):
                    if node.feature is not None:
                        assert node.gain >= 0
                        assert node.left.n_samples + node.right.n_samples == node.n_samples
                        assert np.isfinite(node.threshold)

    def test_separable_accuracy(self):
        x, y = separable_dataset(n=300, seed=4)
        forest = train_gbdt(x, y, BoostConfig(rounds=20, max_depth=3, learning_rate=0.3))
        assert (predict(forest, x) == y).mean() >= 0.95

    def test_deterministic(self):
        x, y = separable_dataset(n=100, seed=5)
        a = train_gbdt(x, y, BoostConfig(rounds=3, subsample=0.8, seed=9))
        b = train_gbdt(x, y, BoostConfig(rounds=3, subsample=0.8, seed=9))
        assert forest_to_dict(a) == forest_to_dict(b)


class TestFeatureImportance:
    def test_single_feature_forest_ranks_it_first(self):
        x, y = separable_dataset(seed=6)
        forest = train_gbdt(x, y, BoostConfig(rounds=2, max_depth=2))
        assert feature_importance(forest)[0] == 0

    def test_unsplit_forest_gives_identity_ranking(self):
        x = np.ones((20, 5))
        y = np.array([0, 1] * 10)
        forest = train_gbdt(x, y, BoostConfig(rounds=2))
        assert feature_importance(forest) == [0, 1, 2, 3, 4]

    def test_ranking_is_permutation(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((80, 6))
        y = rng.integers(0, 2, size=80)
        forest = train_gbdt(x, y, BoostConfig(rounds=5, max_depth=2))
        assert sorted(feature_importance(forest)) == list(range(6))


class TestProjectTopD:
    def test_full_d_is_column_permutation(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((10, 4))
        ranking = [2, 0, 3, 1]
        out = project_top_d(x, ranking, 4)
        np.testing.assert_array_equal(out, x[:, [2, 0, 3, 1]])

    def test_d1_on_separable_retains_informative(self):
        x, y = separable_dataset(seed=9)
        forest = train_gbdt(x, y, BoostConfig(rounds=3, max_depth=2))
        ranking = feature_importance(forest)
        out = project_top_d(x, ranking, 1)
        np.testing.assert_array_equal(out[:, 0], x[:, 0])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            project_top_d(np.zeros((3, 4)), [0, 1, 2, 3], 5)
        with pytest.raises(ValueError):
            project_top_d(np.zeros((3, 4)), [0, 1, 2, 3], 0)

    def test_projection_then_inverse_scatter_is_exact(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((12, 6))
        ranking = [4, 1, 5, 0, 3, 2]
        d = 3
        projected = project_top_d(x, ranking, d)
        restored = np.zeros_like(x)
        for col, feature in enumerate(ranking[:d]):
            restored[:, feature] = projected[:, col]
        for feature in ranking[:d]:
            np.testing.assert_array_equal(restored[:, feature], x[:, feature])


class TestForestJson:
    def test_roundtrip(self):
        x, y = separable_dataset(n=80, seed=11)
        forest = train_gbdt(x, y, BoostConfig(rounds=2, max_depth=2))
        data = json.loads(json.dumps(forest_to_dict(forest)))
        back = forest_from_dict(data)
        np.testing.assert_array_equal(predict(back, x), predict(forest, x))
        assert forest_to_dict(back) == forest_to_dict(forest)
