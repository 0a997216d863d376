import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gssl.errors import DataError
from gssl.sampling import (CLAMP_RADIUS, DomainSpec, LabelModelSpec, LabelSet, constant_function,
                           continuum_laplacian_residual, label_function, read_cloud_csv,
                           sample_points, select_labels, write_cloud_csv)


def test_cube_sampling_is_reproducible():
    dom = DomainSpec("unit-cube", 2)
    a = sample_points(dom, 4, seed=7)
    b = sample_points(dom, 4, seed=7)
    assert a.points.shape == (4, 2)
    assert np.array_equal(a.points, b.points)
    assert np.all((a.points >= 0) & (a.points <= 1))


def test_points_are_read_only():
    cloud = sample_points(DomainSpec("unit-ball", 2), 10, seed=0)
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 5.0


def test_ball_mean_near_origin():
    n = 10_000
    cloud = sample_points(DomainSpec("unit-ball", 2), n, seed=1)
    assert np.all(np.linalg.norm(cloud.points, axis=1) < 1.0)
    assert np.linalg.norm(cloud.points.mean(axis=0)) < 4.0 / math.sqrt(n)


def test_ball_radial_volume_fraction_3d():
    n = 10_000
    cloud = sample_points(DomainSpec("unit-ball", 3), n, seed=2)
    frac = np.mean(np.linalg.norm(cloud.points, axis=1) < 2 ** (-1 / 3))
    assert abs(frac - 0.5) < 4 * math.sqrt(0.25 / n)


@pytest.mark.parametrize("kind,d", [("unit-ball", 1), ("sphere", 2)])
def test_bad_domains_rejected(kind, d):
    with pytest.raises(ValueError):
        DomainSpec(kind, d)


def test_zero_points_rejected():
    with pytest.raises(ValueError):
        sample_points(DomainSpec("unit-cube", 2), 0, seed=0)


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(["unit-ball", "unit-cube"]), d=st.integers(2, 5),
       n=st.integers(1, 300), seed=st.integers(0, 2**32 - 1))
def test_samples_inside_domain(kind, d, n, seed):
    dom = DomainSpec(kind, d)
    cloud = sample_points(dom, n, seed)
    assert cloud.n == n and cloud.dimension == d
    assert dom.contains(cloud.points).all()
    assert np.all(dom.boundary_distance(cloud.points) >= 0)


# label functions

def test_model2_hand_values():
    assert label_function("model2", 2)(np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert label_function("model2", 3)(np.array([1.0, 0.0, 0.0])) == pytest.approx(2 / 3)


@pytest.mark.parametrize("d", [2, 3, 4, 5])
def test_model2_analytic_laplacian_vanishes(d):
    g = label_function("model2", d)
    x = np.random.default_rng(d).uniform(-0.5, 0.5, size=(5, d))
    assert np.allclose(np.trace(g.hess(x), axis1=1, axis2=2), 0.0, atol=1e-14)


def test_model2_fd_residual_small():
    g = label_function("model2", 2)
    for x in np.random.default_rng(0).uniform(-0.6, 0.6, size=(10, 2)):
        assert abs(continuum_laplacian_residual(g, x, 1e-3)) <= 1e-6


def test_model1_fd_residual_small():
    g = label_function("model1", 2)
    assert abs(continuum_laplacian_residual(g, np.array([0.0, 0.7]), 1e-3)) <= 1e-4


def test_model1_3d_harmonic_away_from_sources():
    g = label_function("model1", 3)
    assert abs(continuum_laplacian_residual(g, np.array([0.1, 0.5, 0.3]), 1e-3)) <= 1e-3


def test_constant_residual_exact():
    assert continuum_laplacian_residual(constant_function(2.5), np.array([0.3, 0.1]), 1e-3) == 0.0


@settings(max_examples=60, deadline=None)
@given(r=st.floats(0.2, 0.99), theta=st.floats(0, 2 * math.pi))
def test_model1_antisymmetry(r, theta):
    g = label_function("model1", 2)
    x = np.array([r * math.cos(theta), r * math.sin(theta)])
    assert g(-x) == pytest.approx(-g(x), abs=1e-12)


def test_model1_clamped_near_source():
    g = label_function("model1", 2)
    z = np.array([1 / 8, 0.0])
    inner = g(z + np.array([0.01, 0.0]))
    shell = g(z + np.array([CLAMP_RADIUS, 0.0]))
    assert np.isfinite(g(z))
    assert inner == pytest.approx(shell)


def test_model1_neumann_condition_2d():
    g = label_function("model1", 2)
    for th in np.linspace(0.1, 3.0, 7):
        x = np.array([math.cos(th), math.sin(th)])
        assert abs(g.grad(x[None, :])[0] @ x) < 1e-5


@pytest.mark.parametrize("model,d", [("model1", 4), ("model3", 2)])
def test_unsupported_label_function(model, d):
    with pytest.raises(ValueError):
        label_function(model, d)


# label models

def test_beta_one_labels_whole_subset():
    cloud = sample_points(DomainSpec("unit-ball", 2), 2000, seed=3)
    spec = LabelModelSpec("subset", 1.0, radius=0.5)
    g = label_function("model1", 2)
    labels = select_labels(cloud, spec, g, seed=4)
    inside = np.flatnonzero(np.linalg.norm(cloud.points, axis=1) < 0.5)
    assert np.array_equal(labels.indices, inside)
    assert np.allclose(labels.values, g(cloud.points[inside]))


def test_beta_zero_gives_empty_set():
    cloud = sample_points(DomainSpec("unit-ball", 2), 100, seed=3)
    labels = select_labels(cloud, LabelModelSpec("subset", 0.0), label_function("model1", 2), 0)
    assert len(labels) == 0


def test_label_count_concentration():
    n, beta = 10_000, 0.3
    cloud = sample_points(DomainSpec("unit-ball", 2), n, seed=5)
    labels = select_labels(cloud, LabelModelSpec("subset", beta), label_function("model1", 2), 6)
    p = beta * 0.25
    assert abs(len(labels) - n * p) < 4 * math.sqrt(n * p * (1 - p))


def test_boundary_band_region_and_scale():
    cloud = sample_points(DomainSpec("unit-ball", 2), 3000, seed=8)
    spec = LabelModelSpec("boundary-band", 1.0, delta=0.1)
    labels = select_labels(cloud, spec, label_function("model2", 2), 0)
    assert np.all(1 - np.linalg.norm(cloud.points[labels.indices], axis=1) < 0.1)
    spec.check_scale(0.1)
    with pytest.raises(ValueError):
        spec.check_scale(0.05)


def test_label_model_validation():
    with pytest.raises(ValueError):
        LabelModelSpec("subset", 1.5)
    with pytest.raises(ValueError):
        LabelModelSpec("boundary-band", 0.5)
    with pytest.raises(ValueError):
        LabelModelSpec("subset", 0.5, radius=1.0).check_domain(DomainSpec("unit-ball", 2))


def test_label_set_validation():
    ls = LabelSet(np.array([3, 1]), np.array([0.3, 0.1]))
    assert list(ls.indices) == [1, 3] and list(ls.values) == [0.1, 0.3]
    with pytest.raises(DataError):
        LabelSet(np.array([1, 1]), np.array([0.0, 0.0]))
    with pytest.raises(DataError):
        LabelSet(np.array([0]), np.array([np.nan]))
    with pytest.raises(DataError):
        LabelSet(np.array([5]), np.array([1.0]), n=5)


def test_cloud_csv_round_trip(tmp_path):
    dom = DomainSpec("unit-ball", 3)
    cloud = sample_points(dom, 50, seed=9)
    labels = select_labels(cloud, LabelModelSpec("subset", 0.7), label_function("model2", 3), 1)
    path = tmp_path / "cloud.csv"
    write_cloud_csv(path, cloud, labels)
    back, lab = read_cloud_csv(path, dom)
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(lab.indices, labels.indices)
    assert np.array_equal(lab.values, labels.values)
