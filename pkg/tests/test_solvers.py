import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import path_graph, random_connected_dense
from gssl.errors import ConvergenceError, EmptyLabelsError, UnreachableComponentError
from gssl.graph import KernelSpec, build_eps_graph, from_dense
from gssl.sampling import DomainSpec, LabelSet, sample_points
from gssl.solvers import (degeneracy_report, degenerate_mean, iteration_cap, p_schedule, pcg,
                          plap_residual, solve_hard, solve_hard_multi, solve_plap, solve_soft,
                          write_solution)


def dense_harmonic(W, idx, vals):
    n = W.shape[0]
    L = np.diag(W.sum(axis=1)) - W
    free = np.setdiff1d(np.arange(n), idx)
    u = np.zeros(n)
    u[idx] = vals
    if free.size:
        u[free] = np.linalg.solve(L[np.ix_(free, free)], -L[np.ix_(free, idx)] @ vals)
    return u


def ends_labels():
    return LabelSet(np.array([0, 3]), np.array([0.0, 1.0]))


def test_path_graph_hard():
    res = solve_hard(path_graph(4), ends_labels())
    assert np.allclose(res.u, [0, 1 / 3, 2 / 3, 1], atol=1e-12)
    assert res.residual <= 1e-10 and res.method == "hard-laplace"


def test_all_labeled_is_exact():
    g = path_graph(5)
    labels = LabelSet(np.arange(5), np.array([3.0, -1.0, 2.0, 0.5, 7.0]))
    res = solve_hard(g, labels)
    assert res.iterations == 0
    assert np.array_equal(res.u, labels.values)


def test_constant_labels_give_constant():
    g = path_graph(7, 2.0)
    res = solve_hard(g, LabelSet(np.array([1, 5]), np.array([4.2, 4.2])))
    assert np.allclose(res.u, 4.2, atol=1e-12)


def test_labels_fixed_exactly(small_eps_graph):
    idx = np.arange(0, small_eps_graph.n, 9)
    vals = np.sin(idx.astype(float))
    res = solve_hard(small_eps_graph, LabelSet(idx, vals))
    assert np.array_equal(res.u[idx], vals)


def test_empty_and_unreachable():
    g = path_graph(3)
    with pytest.raises(EmptyLabelsError):
        solve_hard(g, LabelSet(np.zeros(0, int), np.zeros(0)))
    W = np.zeros((4, 4))
    W[0, 1] = W[1, 0] = W[2, 3] = W[3, 2] = 1.0
    with pytest.raises(UnreachableComponentError) as info:
        solve_hard(from_dense(W), LabelSet(np.array([0]), np.array([1.0])))
    assert info.value.components


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 50))
def test_hard_matches_dense_solve(seed, n):
    rng = np.random.default_rng(seed)
    W = random_connected_dense(rng, n)
    m = int(rng.integers(1, n))
    idx = np.sort(rng.choice(n, m, replace=False))
    vals = rng.standard_normal(m)
    res = solve_hard(from_dense(W), LabelSet(idx, vals))
    assert np.abs(res.u - dense_harmonic(W, idx, vals)).max() <= 1e-8


def test_multi_rhs_matches_single(small_eps_graph):
    g = small_eps_graph
    idx = np.arange(3, g.n, 25)
    V = np.random.default_rng(4).random((idx.size, 3))
    U, _, rel = solve_hard_multi(g, idx, V)
    assert np.all(rel <= 1e-10)
    for c in range(3):
        assert np.allclose(U[:, c], solve_hard(g, LabelSet(idx, V[:, c])).u, atol=1e-9)


def test_weight_scaling_invariance(small_eps_graph):
    labels = LabelSet(np.arange(0, small_eps_graph.n, 31), np.linspace(-1, 1, 17))
    a = solve_hard(small_eps_graph, labels)
    b = solve_hard(small_eps_graph.scaled(1e3), labels)
    assert np.abs(a.u - b.u).max() <= 1e-8


def test_iteration_cap():
    assert iteration_cap(10_000) == 2000


def test_pcg_dense_system():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((30, 30))
    A = A @ A.T + 30 * np.eye(30)
    b = rng.standard_normal(30)
    free = np.ones(30, dtype=bool)
    x, _, rel = pcg(lambda X: A @ X, b, np.zeros(30), np.diag(A).copy(), free)
    assert rel[0] <= 1e-10
    assert np.allclose(x, np.linalg.solve(A, b), atol=1e-8)


# soft constraints

def test_soft_constant_labels():
    res = solve_soft(path_graph(5), LabelSet(np.array([0, 4]), np.array([2.0, 2.0])), lam=3.0)
    assert np.allclose(res.u, 2.0, atol=1e-12)


def test_soft_two_node_closed_form():
    g = from_dense([[0.0, 1.0], [1.0, 0.0]])
    labels = LabelSet(np.array([0, 1]), np.array([1.0, 0.0]))
    # lam = |labels| n^2 eps^2 with n = 2, eps = 1
    res = solve_soft(g, labels, lam=8.0, n=2, eps=1.0)
    assert np.allclose(res.u, [0.9, 0.1], atol=1e-12)
    one = solve_soft(g, LabelSet(np.array([0]), np.array([1.0])), lam=4.0, n=2, eps=1.0)
    assert np.allclose(one.u, [1.0, 1.0], atol=1e-12)


def test_soft_approaches_hard_on_path():
    soft = solve_soft(path_graph(4), ends_labels(), lam=1e8)
    assert np.abs(soft.u - np.array([0, 1 / 3, 2 / 3, 1])).max() <= 1e-3


def test_soft_rejects_nonpositive_lambda():
    with pytest.raises(ValueError):
        solve_soft(path_graph(4), ends_labels(), lam=0.0)


@pytest.mark.parametrize("seed", range(5))
def test_soft_gap_monotone_in_lambda(seed):
    rng = np.random.default_rng(seed)
    g = from_dense(random_connected_dense(rng, 40))
    idx = np.sort(rng.choice(40, 6, replace=False))
    labels = LabelSet(idx, rng.standard_normal(6))
    hard = solve_hard(g, labels).u
    gaps = [np.abs(solve_soft(g, labels, lam).u - hard).max() for lam in (1e2, 1e4, 1e6, 1e8)]
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))


# p-Laplacian

def test_p_schedule():
    assert p_schedule(4.0) == [3.0, 4.0]
    assert p_schedule(2.0) == []
    s = p_schedule(10.0)
    assert s[-1] == 10.0 and all(b / a <= 1.5 + 1e-12 for a, b in zip([2.0] + s, s))
    assert p_schedule(1.2)[-1] == 1.2


def test_plap_two_equals_hard(small_eps_graph):
    labels = LabelSet(np.arange(0, small_eps_graph.n, 13), np.cos(np.arange(0, 500, 13.0)))
    a = solve_hard(small_eps_graph, labels).u
    b = solve_plap(small_eps_graph, labels, 2.0).u
    assert np.abs(a - b).max() <= 1e-8


def test_plap_path_p4_equal_increments():
    res = solve_plap(path_graph(4), ends_labels(), 4.0)
    assert np.allclose(res.u, [0, 1 / 3, 2 / 3, 1], atol=1e-5)
    grid = np.linspace(0, 1, 301)
    a, b = np.meshgrid(grid, grid, indexing="ij")
    E = np.abs(a) ** 4 + np.abs(b - a) ** 4 + np.abs(1 - b) ** 4
    i, j = np.unravel_index(np.argmin(E), E.shape)
    assert abs(res.u[1] - grid[i]) <= grid[1] and abs(res.u[2] - grid[j]) <= grid[1]


def test_plap_stationarity_and_energy_monotone():
    cloud = sample_points(DomainSpec("unit-cube", 2), 400, seed=3)
    g = build_eps_graph(cloud, KernelSpec("gaussian", 0.15))
    idx = np.flatnonzero(cloud.points[:, 0] < 0.1)
    labels = LabelSet(idx, np.sin(5 * cloud.points[idx, 1]))
    res = solve_plap(g, labels, 4.0)
    assert plap_residual(g, res.u, 4.0, ~labels.mask(g.n)) <= 1e-6
    for stage in res.energy_history:
        E = stage["energy"]
        assert all(b <= a for a, b in zip(E, E[1:]))


def test_plap_reports_non_convergence():
    cloud = sample_points(DomainSpec("unit-cube", 2), 300, seed=4)
    g = build_eps_graph(cloud, KernelSpec("gaussian", 0.15))
    labels = LabelSet(np.array([0, 1, 2]), np.array([0.0, 1.0, -1.0]))
    with pytest.raises(ConvergenceError) as info:
        solve_plap(g, labels, 6.0, max_outer=1)
    assert info.value.residual > 1e-6
    assert info.value.result is not None


def test_plap_rejects_small_p():
    with pytest.raises(ValueError):
        solve_plap(path_graph(4), ends_labels(), 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.sampled_from([2.0, 3.0, 4.0]))
def test_maximum_principle(seed, p):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 60))
    g = from_dense(random_connected_dense(rng, n, 0.2))
    m = int(rng.integers(1, n))
    labels = LabelSet(np.sort(rng.choice(n, m, replace=False)), rng.uniform(-2, 3, m))
    u = solve_plap(g, labels, p).u
    assert u.min() >= labels.values.min() - 1e-12
    assert u.max() <= labels.values.max() + 1e-12


# diagnostics

def test_degenerate_mean_cases():
    g = from_dense(np.ones((4, 4)) - np.eye(4))
    assert degenerate_mean(g, LabelSet(np.array([0, 2]), np.array([1.0, 4.0]))) == 2.5
    assert degenerate_mean(g, LabelSet(np.array([3]), np.array([-7.0]))) == -7.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_degenerate_mean_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    g = from_dense(random_connected_dense(rng, 20))
    labels = LabelSet(np.sort(rng.choice(20, 5, replace=False)), rng.standard_normal(5))
    y = degenerate_mean(g, labels)
    assert labels.values.min() - 1e-12 <= y <= labels.values.max() + 1e-12


def test_degeneracy_report_flat_solution():
    g = from_dense(np.ones((6, 6)) - np.eye(6))
    labels = LabelSet(np.array([0, 1]), np.array([1.0, 3.0]))
    ybar = 2.0
    u = np.full(6, ybar)
    u[[0, 1]] = [1.0, 3.0]
    g_all = np.linspace(0, 5, 6)
    rep = degeneracy_report(g, labels, u, g_all)
    assert rep.degenerate_mean == ybar
    assert rep.index == 0.0
    assert rep.spike_count == 2


def test_degeneracy_report_nan_and_full():
    g = from_dense(np.ones((3, 3)) - np.eye(3))
    labels = LabelSet(np.array([0]), np.array([1.0]))
    rep = degeneracy_report(g, labels, np.ones(3), g_all=np.ones(3))
    assert np.isnan(rep.index)
    full = LabelSet(np.arange(3), np.array([1.0, 2.0, 3.0]))
    assert degeneracy_report(g, full, full.values).index == 1.0


def test_write_solution(tmp_path):
    res = solve_hard(path_graph(4), ends_labels())
    rep = degeneracy_report(path_graph(4), ends_labels(), res.u)
    pts = np.arange(8.0).reshape(4, 2)
    write_solution(tmp_path / "u.csv", tmp_path / "u.json", res, ends_labels(), pts, rep)
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert len(lines) == 5
    assert lines[1].split(",")[0] == "0"
    stats = json.loads((tmp_path / "u.json").read_text())
    assert stats["method"] == "hard-laplace"
    assert stats["degeneracy"]["degenerate_mean"] == pytest.approx(0.5)
