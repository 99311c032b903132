import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rdslab.oseledets import (adapted_norm, centerstable_subspace, continuity_on_uniform_set, det_growth,
                              ell_function, envelope, equivariance_decay, field_at, field_rate_constants,
                              qr_spectrum, rate_constants, unstable_subspace, verify_hyperbolic_estimates,
                              volume_exponent_check)
from rdslab.systems import build_system, cat_map, diag_cocycle, solenoid

GOLD = (1 + math.sqrt(5)) / 2
CAT = math.log(GOLD ** 2)
DIAG = (0.5 * math.log(6), 0.5 * math.log(1 / 12))


def test_diag_spectrum_closed_form():
    d = diag_cocycle()
    sp = qr_spectrum(d, d.base(), [0.0, 0.0], 100_000)
    assert np.all(np.abs(sp.raw - DIAG) <= 4 * sp.raw_stderr + 1e-12)
    assert sp.dims == (1, 0, 1)


def test_cat_map_exponents_are_log_eigenvalues():
    c = cat_map()
    sp = qr_spectrum(c, c.base(), [0.1, 0.2], 10_000)
    assert sp.raw == pytest.approx([CAT, -CAT], abs=1e-6)


def test_spectrum_invariant_under_initial_frame():
    s = build_system("random_solenoid", 4)
    x = np.array(s.initial_state, float)
    rng = np.random.default_rng(0)
    a = qr_spectrum(s, s.base(), x, 20_000, n_burn=200)
    b = qr_spectrum(s, s.base(), x, 20_000, n_burn=200, frame=np.linalg.qr(rng.normal(size=(3, 3)))[0])
    se = np.hypot(a.raw_stderr, b.raw_stderr)
    assert np.all(np.abs(a.raw - b.raw) <= 3 * se + 1e-9)


def test_sum_of_exponents_matches_log_det_average():
    s = build_system("solenoid_varexp")
    rep = volume_exponent_check(s, s.base(), np.array(s.initial_state), 20_000)
    assert rep["relative_error"] <= 1e-2


def test_cat_unstable_direction_is_golden():
    c = cat_map()
    E, cert = unstable_subspace(c, c.base(), [0.1, 0.2], 60, 1)
    v = E.basis[:, 0]
    assert abs(v[1] / v[0]) == pytest.approx(1 / GOLD, rel=1e-12)
    S, _ = centerstable_subspace(c, c.base(), [0.1, 0.2], 60, 1)
    w = S.basis[:, 0]
    assert abs(w[1] / w[0]) == pytest.approx(GOLD, rel=1e-12)
    assert abs(v @ w) < 1e-12


def test_splitting_is_equivariant_for_the_solenoid():
    s = solenoid()
    f = field_at(s, s.base(), s.initial_state, back=120, fwd=120)
    assert f.equivariance_residual(0)["unstable"] <= 1e-6


def test_equivariance_residual_decays_geometrically():
    s = build_system("random_torus_hyperbolic")
    rep = equivariance_decay(s, s.base(), s.initial_state, 1, ns=(4, 8, 12, 16))
    assert rep["rate"] < 1


def test_adapted_norm_of_unit_vector_for_constant_diagonal():
    d = diag_cocycle(factors=((2.0, 0.5),))
    f = field_at(d, d.base(), [0.0, 0.0], back=450, fwd=450, k_u=1, k_c=0)
    an = adapted_norm(f, 0, 400, math.log(2), 0.1)
    # sum_n e^{-0.1 n}
    assert an([1.0, 0.0]) == pytest.approx(1 / (1 - math.exp(-0.1)), rel=1e-12)


def test_field_rate_constants_are_positive_for_hyperbolic_systems():
    s = build_system("cat_map")
    f = field_at(s, s.base(), s.initial_state, back=100, fwd=100)
    lam0, eps0, lam = field_rate_constants(f)
    assert lam0 == pytest.approx(CAT, rel=1e-9)
    assert 0 < eps0 < lam0 and lam == pytest.approx(lam0 - eps0)


@pytest.mark.parametrize("name", ["solenoid", "tail_banach", "random_torus_hyperbolic"])
def test_one_step_inequalities_hold(name):
    s = build_system(name)
    x = np.array(s.initial_state, float)
    sp = qr_spectrum(s, s.base(), x, 5000, n_burn=500)
    ku, kc, _ = sp.dims
    lam0, eps0, _ = rate_constants(sp)
    f = field_at(s, s.base(), x, back=200, fwd=200, k_u=ku, k_c=kc)
    lo, hi = f.valid_range(41)
    rep = verify_hyperbolic_estimates(f, list(range(lo, hi, 25)), 40, lam0, eps0, probes=30)
    assert rep.ok
    assert rep.max_defect_ratio <= 1


def test_envelope_properties():
    rng = np.random.default_rng(0)
    v = np.exp(rng.normal(size=60))
    env, _ = envelope(v, 0.05)
    assert np.all(env >= v)
    assert np.all(env[1:] <= math.exp(0.05) * env[:-1] * (1 + 1e-12))
    assert np.all(env[:-1] <= math.exp(0.05) * env[1:] * (1 + 1e-12))


@given(st.floats(0.5, 3.0), st.floats(0.01, 0.2))
def test_envelope_of_constant_is_constant(c, eps):
    env, _ = envelope(np.full(20, c), eps)
    assert np.allclose(env, c)


def test_ell_function_for_constant_system_is_constant():
    c = cat_map()
    f = field_at(c, c.base(), [0.1, 0.2], back=120, fwd=120)
    lam0, eps0, _ = field_rate_constants(f)
    env = ell_function(f, range(-20, 20), 40, lam0, eps0)
    assert np.allclose(env.base_values, env.base_values[0])
    assert np.allclose(env.values, env.base_values)
    assert env.envelope_ok()


def test_det_growth_diag_x_axis():
    d = diag_cocycle()
    sp = qr_spectrum(d, d.base(), [0.0, 0.0], 4000)
    f = field_at(d, d.base(), [0.0, 0.0], back=50, fwd=4100, k_u=1, k_c=0, n_burn=0)
    rep = det_growth(f, 0, 4000, sp)
    # the same 4000 factors enter both averages; the QR frame adds a transient of O(1/n)
    assert rep["rate"] == pytest.approx(sp.raw[0], abs=1e-3)
    assert rep["agrees"]
    assert abs(rep["rate"] - DIAG[0]) < 5 * 0.5 * math.log(1.5) / math.sqrt(4000)


def test_det_growth_full_space_is_exact_for_constant_cocycle():
    c = cat_map()
    sp = qr_spectrum(c, c.base(), [0.1, 0.2], 2000)
    f = field_at(c, c.base(), [0.1, 0.2], back=50, fwd=300)
    rep = det_growth(f, 0, 200, sp, block="all")
    assert rep["rate"] == pytest.approx(0.0, abs=1e-12)
    assert rep["agrees"]


def test_det_growth_cat_unstable_line():
    c = cat_map()
    sp = qr_spectrum(c, c.base(), [0.1, 0.2], 2000)
    f = field_at(c, c.base(), [0.1, 0.2], back=50, fwd=300)
    rep = det_growth(f, 0, 200, sp)
    assert rep["rate"] == pytest.approx(CAT, rel=1e-9)
    assert rep["agrees"]


def test_cat_splitting_is_constant_on_uniform_set():
    c = cat_map()
    rep = continuity_on_uniform_set(c, c.base(), sample_size=30, N=10)
    assert not rep["inconclusive"]
    assert rep["max_unstable"] < 1e-10 and rep["max_centerstable"] < 1e-10
