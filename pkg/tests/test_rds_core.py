import numpy as np
import pytest
from hypothesis import given, strategies as st

from rdslab.rds_core import (DomainEscape, DrivingSystem, compose_backward, compose_forward,
                             derivative_cocycle, estimate_tail_contraction, finite_difference_cocycle,
                             forward_many, orbit_window)
from rdslab.systems import BUILTINS, build_system, diag_cocycle, solenoid, tail_banach


def test_driving_rejects_bad_probabilities():
    with pytest.raises(ValueError):
        DrivingSystem(2, (0.7, 0.4))
    with pytest.raises(ValueError):
        DrivingSystem(2, (1.2, -0.2))
    with pytest.raises(ValueError):
        DrivingSystem(3, (0.5, 0.5))


@given(st.integers(0, 2 ** 64 - 1), st.integers(-10 ** 6, 10 ** 6), st.integers(1, 300))
def test_symbols_are_pure_functions_of_seed_and_index(seed, start, n):
    d = DrivingSystem(3, (0.2, 0.3, 0.5), seed)
    w = d.symbols(start, n)
    assert np.array_equal(w, d.symbols(start, n))
    # the same index read through a different window
    k = n // 2
    assert w[k] == d.symbols(start + k, 1)[0]
    assert w.min() >= 0 and w.max() < 3


@given(st.integers(0, 2 ** 32), st.integers(-500, 500), st.integers(0, 50))
def test_shift_forward_then_back_is_identity(seed, offset, m):
    p = DrivingSystem(2, (0.5, 0.5), seed).point(offset)
    assert np.array_equal(p.shift(m).shift(-m).window(-20, 40), p.window(-20, 40))
    assert p.shift(m).symbol(0) == p.symbol(m)


def test_symbol_frequencies_match_probabilities():
    s = DrivingSystem(2, (0.25, 0.75), 11).symbols(0, 200_000)
    assert abs(s.mean() - 0.75) < 5 * np.sqrt(0.25 * 0.75 / len(s))


def test_trajectory_steps_agree_with_fiber_maps():
    s = build_system("random_solenoid", 3)
    tr = compose_forward(s, s.base(), [0.1, 0.0, 0.0], 50)
    syms = s.base().window(0, 50)
    for k in range(50):
        assert np.allclose(s.wrap(s.step(syms[k], tr.points[k])), tr.points[k + 1], atol=0)


def test_diag_cocycle_is_a_product_of_factors():
    d = diag_cocycle(seed=7)
    syms = d.base().window(0, 3)
    fac = np.array([(3.0, 1 / 3), (2.0, 0.25)])[syms]
    tr = compose_forward(d, d.base(), [1.0, 1.0], 3)
    assert np.allclose(tr.end, fac.prod(axis=0), rtol=1e-14)


def test_backward_composition_inverts_forward_orbit():
    s = solenoid()
    tr = compose_forward(s, s.base(), [0.1234567, 0.0, 0.0], 500)
    y = tr.points[-1]
    z = compose_backward(s, s.base(500), y, 20, seeds=tr.points[::-1][:21])
    fw = compose_forward(s, s.base(480), z[-1], 20).end
    assert np.abs(s.difference(fw, y)).max() < 1e-10


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_derivative_cocycle_matches_finite_differences(name):
    s = build_system(name, 3)
    x = np.asarray(s.initial_state, float) + 0.01
    D = derivative_cocycle(s, s.base(), x, 3)
    F = finite_difference_cocycle(s, s.base(), x, 3)
    assert np.abs(D - F).max() <= 1e-5 * np.abs(D).max()


def test_derivative_cocycle_chain_rule():
    s = build_system("random_torus_hyperbolic", 2)
    x = np.array([0.3, 0.7])
    D5 = derivative_cocycle(s, s.base(), x, 5)
    D2 = derivative_cocycle(s, s.base(), x, 2)
    x2 = compose_forward(s, s.base(), x, 2).end
    D3 = derivative_cocycle(s, s.base(2), x2, 3)
    assert np.allclose(D5, D3 @ D2, rtol=1e-12)


def test_tail_contraction_rate_is_mean_log_tail_factor():
    tb = tail_banach(seed=1)
    r = estimate_tail_contraction(tb, tb.base(), np.array(tb.initial_state), 20_000)
    expected = 0.5 * (np.log(0.05) + np.log(0.15))
    assert abs(r - expected) < 0.03


def test_domain_escape_is_reported():
    s = build_system("quadratic_model")
    with pytest.raises(DomainEscape):
        forward_many(s, [s.base()], np.array([[1.0, 0.0]]), 50)


def test_runs_are_bitwise_reproducible():
    s = build_system("solenoid_varexp", 5)
    a = orbit_window(s, s.base(), s.initial_state, 30, 30, 100).points
    b = orbit_window(s, s.base(), s.initial_state, 30, 30, 100).points
    assert a.tobytes() == b.tobytes()
