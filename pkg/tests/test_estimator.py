import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfnrecon.estimator import (
    FitConfig,
    coordinate_sweep,
    edge_derivative,
    edge_objective,
    edge_profile_products,
    fit,
    optimize_edge,
)
from cfnrecon.likelihood import grad_all, log_likelihood_dataset
from cfnrecon.model import sample_leaves
from cfnrecon.tree import complete_tree, random_binary_tree

from .conftest import random_spins


@given(st.integers(1, 200), st.data())
@settings(max_examples=60, deadline=None)
def test_two_leaf_closed_form(m, data):
    k = data.draw(st.integers(0, m))
    prod = np.array([1.0] * k + [-1.0] * (m - k))
    cfg = FitConfig.full_range(tol=1e-13)
    expected = float(np.clip(2 * k / m - 1, cfg.theta_min, cfg.theta_max))
    assert optimize_edge(prod, cfg) == pytest.approx(expected, abs=1e-11)


def test_boundary_cases():
    cfg = FitConfig()
    assert optimize_edge(np.ones(10), cfg) == cfg.theta_max
    assert optimize_edge(-np.ones(10), cfg) == cfg.theta_min
    assert optimize_edge(np.zeros(10), cfg) == cfg.theta_min  # flat objective: tie goes low


def test_weighted_edge():
    prod = np.array([1.0, -1.0])
    cfg = FitConfig.full_range(tol=1e-13)
    assert optimize_edge(prod, cfg, weights=np.array([0.8, 0.2])) == pytest.approx(0.6, abs=1e-11)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_edge_derivative_decreasing(w, t1, t2):
    lo, hi = sorted((t1, t2))
    assert edge_derivative(w, lo) >= edge_derivative(w, hi) - 1e-12


def test_edge_derivative_pole():
    with pytest.raises(ZeroDivisionError):
        edge_derivative([1.0], -1.0)
    assert edge_objective([0.5, -0.5], 0.0) == 0.0


def test_config_validation():
    for kw in ({"theta_min": 0.5, "theta_max": 0.4}, {"theta_max": 1.0}, {"tol": 0}, {"max_sweeps": -1}):
        with pytest.raises(ValueError):
            FitConfig(**kw)


def test_edge_products_match_gradient(quartet, rng):
    tree, theta = quartet
    data = random_spins(rng, 20, 4)
    w = edge_profile_products(tree, theta, data, 2)
    np.testing.assert_allclose(w / (1 + theta[2] * w), grad_all(tree, theta, data)[:, 2])


def test_sweep_is_gauss_seidel(rng):
    tree = complete_tree(3)
    data = sample_leaves(tree, np.full(tree.edge_count, 0.8), 500, seed=3)
    seen = []
    cfg = FitConfig()
    coordinate_sweep(tree, np.full(tree.edge_count, 0.5), data, cfg, callback=lambda e, th: seen.append((e, th)))
    order = tree.dfs_edge_order()
    assert [e for e, _ in seen] == order
    for (e_prev, th_prev), (e, th) in zip(seen, seen[1:]):
        # previous edge already updated, everything else untouched
        expected = th_prev.copy()
        expected[e_prev] = optimize_edge(edge_profile_products(tree, th_prev, data, e_prev), cfg)
        np.testing.assert_array_equal(th, expected)


def test_custom_order(quartet, rng):
    tree, theta = quartet
    data = random_spins(rng, 50, 4)
    seen = []
    coordinate_sweep(tree, theta, data, FitConfig(order=(4, 0, 2)), callback=lambda e, th: seen.append(e))
    assert seen == [4, 0, 2]


@pytest.mark.parametrize("seed", range(4))
def test_sweeps_never_decrease_likelihood(seed):
    rng = np.random.default_rng(seed)
    tree = random_binary_tree(6, rng)
    truth = rng.uniform(0.5, 0.95, tree.edge_count)
    data = sample_leaves(tree, truth, 300, seed=seed)
    res = fit(tree, data, np.full(tree.edge_count, 0.3), FitConfig(max_sweeps=100))
    ll = [res.initial_loglik] + res.loglik
    assert all(b >= a - 1e-10 for a, b in zip(ll, ll[1:]))
    assert res.reason in ("converged", "boundary")
    assert res.max_change[-1] < 1e-8


def test_stationary_after_convergence(rng):
    tree = complete_tree(2)
    data = sample_leaves(tree, np.full(tree.edge_count, 0.7), 2000, seed=11)
    res = fit(tree, data, np.full(tree.edge_count, 0.5), FitConfig(threshold=1e-11, tol=1e-13))
    assert res.reason == "converged"
    interior = (res.theta > 0.01 + 1e-6) & (res.theta < 1 - 1e-6)
    g = grad_all(tree, res.theta, data).mean(axis=0)
    assert np.all(np.abs(g[interior]) < 1e-7)


def test_zero_sweeps_and_json(quartet, rng):
    tree, theta = quartet
    data = random_spins(rng, 10, 4)
    res = fit(tree, data, theta, FitConfig(max_sweeps=0))
    assert res.sweeps == 0 and res.reason == "max-sweeps"
    np.testing.assert_array_equal(res.theta, theta)
    doc = json.loads(res.to_json())
    assert doc["schema_version"] == 1 and len(doc["theta"]) == 5


def test_boundary_reason():
    tree = complete_tree(1)
    data = np.ones((5, 2), dtype=np.int8)
    assert fit(tree, data, [0.5, 0.5]).reason == "boundary"


def test_weights_equal_duplicated_rows(quartet, rng):
    tree, theta = quartet
    data = random_spins(rng, 6, 4)
    counts = np.array([1, 2, 3, 1, 1, 2])
    w = counts / counts.sum()
    a = fit(tree, data, theta, weights=w)
    b = fit(tree, np.repeat(data, counts, axis=0), theta)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-9)
    assert log_likelihood_dataset(tree, a.theta, data, w) == pytest.approx(b.loglik[-1])


def test_recovers_truth_with_many_samples():
    tree = complete_tree(2)
    truth = np.array([0.9, 0.85, 0.8, 0.95, 0.9, 0.75])[: tree.edge_count]
    data = sample_leaves(tree, truth, 40000, seed=5)
    res = fit(tree, data, np.full(tree.edge_count, 0.5))
    # the two root edges are only identifiable through their product
    root_edges = [tree.edge_between(tree.root, c) for c in tree.neighbors(tree.root)]
    others = [e for e in range(tree.edge_count) if e not in root_edges]
    np.testing.assert_allclose(res.theta[others], truth[others], atol=0.03)
    assert np.prod(res.theta[root_edges]) == pytest.approx(np.prod(truth[root_edges]), abs=0.03)
