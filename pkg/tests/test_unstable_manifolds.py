import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdslab.oseledets import attractor_cloud, field_at
from rdslab.srb import empirical_srb
from rdslab.systems import build_system
from rdslab.unstable_manifolds import (Chart, ConeConditionError, backward_graph_transform, build_stack,
                                       circle_period, contraction_ratios, field_chart, graph_transform,
                                       iterate_to_unstable, membership_test, stable_chart, tangent_check,
                                       zero_graph)


@pytest.fixture(scope="module")
def quad():
    s = build_system("quadratic_model")
    f = field_at(s, s.base(), s.fixed_point, back=100, fwd=60, n_burn=0)
    return s, f


@pytest.fixture(scope="module")
def sol():
    s = build_system("solenoid")
    return s, field_at(s, s.base(), s.initial_state, back=150, fwd=150)


def test_one_transform_of_the_zero_graph(quad):
    s, f = quad
    g0 = zero_graph(field_chart(f, -1), 0.5, 1001, -1)
    g1 = graph_transform(s, f, -1, g0)
    a = g1.nodes()[:, 0]
    # (u, 0) -> (2u, u^2), i.e. s = a^2 / 4 over a = 2u
    assert np.abs(g1.values[:, 0] - a ** 2 / 4).max() < 1e-12


def test_quadratic_unstable_manifold(quad):
    s, f = quad
    r = iterate_to_unstable(s, f, 0, 40, 0.5, 1e-3)
    a = r.graph.nodes()[:, 0]
    assert np.abs(r.graph.values[:, 0] - 2 * a ** 2 / 7).max() <= 1e-6
    assert r.converged
    i = np.argmin(np.abs(a - 0.25))
    assert r.graph.slopes[i, 0, 0] == pytest.approx(4 * a[i] / 7, abs=1e-6)


def test_cone_condition_holds_on_small_radius(quad):
    s, f = quad
    iterate_to_unstable(s, f, 0, 40, 0.5, 1e-3, cone_norms=True, cone_radius=0.175)


def test_cone_condition_fails_on_large_radius(quad):
    s, f = quad
    with pytest.raises(ConeConditionError):
        iterate_to_unstable(s, f, 0, 40, 0.5, 1e-3, cone_norms=True, cone_radius=0.5)


def test_membership_accepts_leaf_points_and_rejects_others(quad):
    s, f = quad
    for u in (0.05, -0.2, 0.3):
        on = np.array([u, 2 * u ** 2 / 7])
        assert membership_test(s, f, 0, on, 30, np.log(2), radius=0.5).accepted
        off = on + np.array([0.0, 0.05])
        res = membership_test(s, f, 0, off, 30, np.log(2), radius=0.5)
        assert not res.accepted and res.reason == "tube escape"


def test_backward_transform_keeps_the_stable_axis(quad):
    s, f = quad
    h = zero_graph(stable_chart(f, 0), 0.3, 301, 0)
    h1 = backward_graph_transform(s, f, 0, h)
    assert np.abs(h1.values).max() < 1e-12


@pytest.mark.parametrize("name", ["cat_map", "solenoid", "tail_banach"])
def test_graph_transform_contracts(name):
    s = build_system(name)
    f = field_at(s, s.base(), s.initial_state, back=150, fwd=150)
    n = 41 if f.k_u == 1 else 11
    assert contraction_ratios(s, f, 0, 0.05, n, 10, seed=3).max() <= 0.95


@settings(max_examples=5)
@given(st.integers(0, 10 ** 6))
def test_contraction_holds_for_random_pairs(seed):
    s = build_system("random_torus_hyperbolic")
    f = field_at(s, s.base(), s.initial_state, back=100, fwd=100)
    assert contraction_ratios(s, f, 0, 0.05, 21, 3, seed=seed).max() <= 0.95


def test_leaf_is_tangent_to_unstable_direction(sol):
    s, f = sol
    g = iterate_to_unstable(s, f, 0, 30, 0.05, 1e-3).graph
    rep = tangent_check(s, f, 0, g, len(g.values) // 3)
    assert rep["d_H"] < 1e-6


def test_solenoid_chart_period_is_one_turn(sol):
    s, f = sol
    P = circle_period(s, field_chart(f, 0))
    Bu = field_chart(f, 0).Bu[:, 0]
    # one turn of the angle is 1 / |theta-component| in u-coordinates when E^cs ignores the angle
    assert P is not None and P > 0
    assert P * abs(Bu[0]) == pytest.approx(1.0, rel=0.05)


def test_chart_displacement_round_trip():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    ch = Chart(np.zeros(3), Q[:, :1], Q[:, 1:])
    a, c = rng.normal(size=(5, 1)), rng.normal(size=(5, 2))
    z = ch.displacement(a, c)
    back = z @ ch.inverse.T
    assert np.allclose(back[:, :1], a) and np.allclose(back[:, 1:], c)


@pytest.fixture(scope="module")
def stack():
    s = build_system("solenoid_varexp")
    om = s.base()
    cf = field_at(s, om, s.fixed_point, back=80, fwd=80, n_burn=0)
    W = attractor_cloud(s, om, 20, 80, 80, n_burn=300, seed=3)
    return s, build_stack(s, W, cf, 0, spacing=1e-3, k=14, full_circle=True)


def test_stack_leaves_are_identical_or_disjoint(stack):
    s, st_ = stack
    assert st_.identical_or_disjoint()
    assert st_.multiplicity.sum() + len(st_.dropped) == 20


def test_stack_assigns_attractor_samples(stack):
    s, st_ = stack
    E = empirical_srb(s, 300, 4, 2000, seed=2)
    idx, dist, a = st_.assign(s, E.points())
    assert np.mean(idx >= 0) > 0.8
    assert np.all(np.abs(a) <= st_.radius + 1e-12)


def test_stack_chart_map_recovers_leaf_points(stack):
    s, st_ = stack
    a = np.array([[0.1], [-0.3]])
    X = st_.center.origin + st_.chart_map(0, a)
    idx, dist, a2 = st_.assign(s, X)
    assert np.all(idx == 0)
    assert np.allclose(a2.ravel(), a.ravel(), atol=1e-9)
