import math

import numpy as np
import pytest

import dpgbdt.dpboost as dpb
from dpgbdt.data import Dataset, FeatureSpec
from dpgbdt.dpboost import (DPBoostParams, gdf_filter, geometric_leaf_clip, greedy_tree,
                            leaf_clip_bound, leaf_sensitivity, train_dpboost)

from conftest import toy_dataset

UNIT = [FeatureSpec.numerical("x", 0.0, 1.0)]


def test_gdf_examples():
    np.testing.assert_array_equal(gdf_filter([0.2, -1.0, 0.9], 1.0), [0, 1, 2])
    assert gdf_filter([1.5, -2.0], 1.0).size == 0
    np.testing.assert_array_equal(gdf_filter([0.5, 1.5], 1.0), [0])


def test_clip_schedule_examples():
    assert leaf_clip_bound(1, 3.0, 0.4) == 3.0
    assert geometric_leaf_clip(0.9, 3, 1.0, 0.5) == 0.25
    assert geometric_leaf_clip(-0.9, 3, 1.0, 0.5) == -0.25
    assert geometric_leaf_clip(0.0, 40, 1.0, 0.5) == 0.0
    with pytest.raises(ValueError):
        leaf_clip_bound(0, 1.0, 0.1)


def test_leaf_sensitivity_uses_tighter_bound():
    assert leaf_sensitivity(1, 1.0, 1.0, 0.1) == 0.5
    assert leaf_sensitivity(30, 1.0, 1.0, 0.5) == pytest.approx(2 * 0.5 ** 29)


def test_budget_split():
    p = DPBoostParams(eps=1.05, eps_init=0.05, n_trees=100, trees_per_ensemble=50, depth=4)
    assert p.n_ensembles == 2
    assert p.eps_tree == pytest.approx(0.5)
    assert p.eps_leaf == pytest.approx(0.25)
    assert p.eps_split_level * p.depth + p.eps_leaf == pytest.approx(p.eps_tree)
    assert DPBoostParams(g_star=2.0).delta_u == 12.0
    assert DPBoostParams(init_score=False, eps=0.3).eps_trees == 0.3


def test_param_validation():
    for bad in (dict(n_trees=0), dict(eps=0.0), dict(eps=0.05, eps_init=0.05),
                dict(lam=0.0), dict(depth=0)):
        with pytest.raises(ValueError):
            DPBoostParams(**bad)


def test_noise_free_single_tree_is_greedy():
    x = np.linspace(0.0, 1.0, 400)
    y = np.where(x <= 0.3, -1.0, 1.0)
    D = Dataset(x.reshape(-1, 1), y, UNIT)
    p = DPBoostParams(eps=1e7, n_trees=1, trees_per_ensemble=1, depth=1, g_star=2.0,
                      lam=1.0, eta=1.0, init_score=False)
    ens = train_dpboost(D, p, seed=0)
    tree = ens.trees[0]
    assert tree.thresholds[0] == pytest.approx(0.3, abs=0.01)
    left = x <= tree.thresholds[0]
    # gradient is -y, the leaf is -sum(g) / (n + lam)
    expected = np.array([y[left].sum(), y[~left].sum()]) / (
        np.array([left.sum(), (~left).sum()]) + 1.0)
    np.testing.assert_allclose(tree.leaves, expected, atol=1e-4)


def test_leaf_noise_scale():
    p = DPBoostParams(eps=2.0, eps_init=0.5, depth=1, lam=1.0, g_star=1.0)
    rng = np.random.default_rng(0)
    X = np.linspace(0, 1, 50).reshape(-1, 1)
    leaves = np.concatenate([greedy_tree(X, np.zeros(50), UNIT, p, rng, 1).leaves
                             for _ in range(20000)])
    scale = leaf_sensitivity(1, 1.0, 1.0, p.eta) / p.eps_leaf
    assert leaves.std() == pytest.approx(math.sqrt(2) * scale, rel=0.02)


def _record_rows(monkeypatch):
    used = []
    real = dpb.greedy_tree

    def spy(X, g, schema, p, rng, t):
        used.append(X[:, 0].copy())
        return real(X, g, schema, p, rng, t)

    monkeypatch.setattr(dpb, "greedy_tree", spy)
    return used


@pytest.mark.parametrize("gdf", [True, False])
def test_trees_in_one_ensemble_use_disjoint_rows(monkeypatch, gdf):
    used = _record_rows(monkeypatch)
    schema = [FeatureSpec.numerical("id", 0.0, 1000.0), FeatureSpec.numerical("x", 0.0, 1.0)]
    rng = np.random.default_rng(1)
    D = Dataset(np.column_stack([np.arange(600.0), rng.random(600)]), rng.normal(size=600) * 3,
                schema)
    p = DPBoostParams(eps=1.0, n_trees=12, trees_per_ensemble=6, depth=2, g_star=1.0, gdf=gdf)
    train_dpboost(D, p, seed=2)
    assert len(used) == 12
    for e in range(2):
        ids = np.concatenate(used[6 * e:6 * e + 6])
        assert ids.size == np.unique(ids).size
        assert all(u.size <= 600 // 6 for u in used[6 * e:6 * e + 6])


def test_gdf_leaves_large_gradients_for_later(monkeypatch):
    used = _record_rows(monkeypatch)
    schema = [FeatureSpec.numerical("id", 0.0, 1000.0)]
    y = np.where(np.arange(200) < 100, 0.5, 5.0)
    D = Dataset(np.arange(200.0).reshape(-1, 1), y, schema)
    p = DPBoostParams(eps=1.0, n_trees=2, trees_per_ensemble=2, depth=1, g_star=1.0,
                      init_score=False, gdf=True)
    train_dpboost(D, p, seed=0)
    assert all(np.all(u < 100) for u in used)


def _captured_noise_state(monkeypatch, init_score):
    captured = {}
    real = dpb.make_streams

    def spy(seed):
        captured.update(real(seed))
        return captured

    monkeypatch.setattr(dpb, "make_streams", spy)
    D = toy_dataset(n=300, seed=0)
    p = DPBoostParams(eps=1.0, n_trees=6, trees_per_ensemble=3, depth=2, init_score=init_score)
    ens = train_dpboost(D, p, seed=7)
    return captured["noise"].bit_generator.state, ens


def test_init_score_flag_does_not_shift_tree_randomness(monkeypatch):
    on_state, on = _captured_noise_state(monkeypatch, True)
    off_state, off = _captured_noise_state(monkeypatch, False)
    assert on_state == off_state
    assert off.init_score == 0.0 and on.init_score != 0.0


def test_partition_too_small():
    D = toy_dataset(n=10, seed=0)
    with pytest.raises(ValueError):
        train_dpboost(D, DPBoostParams(trees_per_ensemble=50), seed=0)


def test_deterministic_and_learns():
    D = toy_dataset(n=2000, seed=3)
    p = DPBoostParams(eps=50.0, n_trees=40, trees_per_ensemble=20, depth=3, g_star=3.0,
                      m_star=5.0, lam=5.0, eta=0.2, gdf=False)
    a = train_dpboost(D, p, seed=1)
    b = train_dpboost(D, p, seed=1)
    assert a.to_dict() == b.to_dict()
    r2 = 1 - np.mean((a.predict(D.X) - D.y) ** 2) / D.y.var()
    assert r2 > 0.3
