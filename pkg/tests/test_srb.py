from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdslab.entropy import stack_for_entropy
from rdslab.oseledets import field_at
from rdslab.srb import (conditional_comparison, density_functional_equation_check, empirical_srb,
                        image_leaf_pair, leaf_density, leaf_volume, pushforward_density_check,
                        reference_change_residual, stack_leaf_density, standard_errors, trapezoid_weights)
from rdslab.systems import build_system
from rdslab.unstable_manifolds import Chart, zero_graph


def _diagonal_segment():
    ch = Chart(np.zeros(2), np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
    g = zero_graph(ch, 1.0, 1001)
    a = g.nodes()
    return replace(g, values=a.copy(), slopes=np.ones((len(a), 1, 1)))


def test_volume_of_diagonal_segment():
    g = _diagonal_segment()
    assert leaf_volume(g, ([0.0], [1.0])) == pytest.approx(np.sqrt(2), abs=1e-12)
    assert leaf_volume(g, ([0.0], [1.0]), norm="l1") == pytest.approx(2.0, abs=1e-12)
    assert leaf_volume(g, ([0.0], [1.0]), norm="linf") == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20)
@given(st.integers(2, 50), st.floats(0.01, 2.0))
def test_trapezoid_weights_integrate_constants(n, h):
    assert trapezoid_weights(n, h, 1).sum() == pytest.approx((n - 1) * h)
    assert trapezoid_weights(n, h, 2).sum() == pytest.approx(((n - 1) * h) ** 2)


@pytest.fixture(scope="module")
def varexp():
    s = build_system("solenoid_varexp")
    f = field_at(s, s.base(), s.initial_state, back=150, fwd=150)
    return s, f


def test_pushforward_matches_image_leaf(varexp):
    s, f = varexp
    W, W2 = image_leaf_pair(s, f, 0, 0.05, 1e-3)
    rep = pushforward_density_check(s, f.window.symbol(0), W, W2)
    assert rep.ok and rep.max_rel_error < 1e-6


def test_pushforward_on_linear_map():
    s = build_system("cat_map")
    f = field_at(s, s.base(), s.initial_state, back=100, fwd=100)
    W, W2 = image_leaf_pair(s, f, 0, 0.05, 1e-3)
    assert pushforward_density_check(s, 0, W, W2).max_rel_error < 1e-9


def test_density_normalized_and_functional_equation(varexp):
    s, f = varexp
    _, K, _, q = leaf_density(s, f, 0, 0.05, 1e-3)
    _, W2 = image_leaf_pair(s, f, 0, 0.05, 1e-3)
    _, _, _, q2 = leaf_density(s, f, 1, W2.radius, 1e-3)
    assert K.converged and K.tail_rate < 1
    assert q.integral == pytest.approx(1.0, abs=1e-12)
    assert density_functional_equation_check(s, f.window.symbol(0), q, q2)["coefficient_of_variation"] < 1e-3
    # a density that is not conditional fails the same check
    bad = density_functional_equation_check(s, f.window.symbol(0), q, q2, perturb=0.1)
    assert not bad["ok"] and bad["coefficient_of_variation"] > 1e-2


def test_linear_map_gives_uniform_density():
    s = build_system("cat_map")
    f = field_at(s, s.base(), s.initial_state, back=100, fwd=100)
    _, K, m, q = leaf_density(s, f, 0, 0.05, 1e-3)
    assert np.abs(K.log_delta).max() < 1e-12
    assert np.allclose(q.values, 1 / m.total(), rtol=1e-12)


def test_reference_change_is_multiplicative(varexp):
    s, f = varexp
    tower, K, _, _ = leaf_density(s, f, 0, 0.05, 1e-3)
    assert reference_change_residual(s, tower, [0.0], [0.03]) < 1e-9


def test_empirical_measure_is_invariant_and_uniform_for_cat_map():
    s = build_system("cat_map")
    E = empirical_srb(s, 100, 16, 4000, seed=0)
    assert E.invariance_probe(s)["ok"]
    m, _ = E.masses(s, E.samples)
    z = np.abs(m.mean(axis=0) - 1 / 16) / standard_errors(m)
    assert z.max() < 5


def test_empirical_samples_are_reproducible():
    s = build_system("solenoid")
    a = empirical_srb(s, 50, 3, 100, seed=7).samples
    b = empirical_srb(s, 50, 3, 100, seed=7).samples
    assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def stacked():
    s = build_system("solenoid_varexp")
    st_ = stack_for_entropy(s, n_points=10)
    E = empirical_srb(s, 300, 8, 5000, seed=1)
    dens = [stack_leaf_density(s, st_, i)[2] for i in range(len(st_.leaves))]
    return s, st_, E, dens


def test_conditional_histograms_follow_leaf_density(stacked):
    s, st_, E, dens = stacked
    c = conditional_comparison(s, st_, E.points(), dens)
    assert c["status"] == "ok"
    assert c["l1"] < 2 * c["noise_floor"]


def test_wrong_density_is_detected(stacked):
    s, st_, E, dens = stacked
    bad = [replace(d, values=d.values * (1 + 0.8 * np.sin(np.pi * d.leaf.nodes()[:, 0] / d.leaf.radius)))
           for d in dens]
    c = conditional_comparison(s, st_, E.points(), bad)
    assert c["l1"] > 10 * c["noise_floor"]
