import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rdslab.norm_geometry import (GeometryError, Norm, Subspace, UnsupportedMethod, ball_volumes,
                                  calibrate_splitting_constant, coordinate_subspace, det_continuity_modulus,
                                  det_on_subspace, det_properties_check, euclidean_ball_volume, gap,
                                  gap_report, hausdorff_distance, norm_dependence_witness,
                                  projection_from_splitting, unit_ball_volume)

NORMS = ["l1", "l2", "linf"]


def line(theta, norm="l2"):
    return Subspace(np.array([[math.cos(theta)], [math.sin(theta)]]), norm)


def test_norm_parsing_and_validation():
    assert Norm.parse("l1").kind == "l1"
    assert Norm.parse({"kind": "weighted", "weights": [1, 2]}).weights == (1.0, 2.0)
    with pytest.raises(GeometryError):
        Norm("l3")
    with pytest.raises(GeometryError):
        Norm("weighted", (1.0, -1.0))


def test_gap_between_euclidean_lines_is_sine_of_angle():
    for th in (0.05, 0.3, 1.2):
        E, F = line(0.0), line(th)
        assert gap(E, F) == pytest.approx(math.sin(th), rel=1e-9)
        # nearest unit vector of F to a unit vector of E
        assert hausdorff_distance(E, F) == pytest.approx(2 * math.sin(th / 2), rel=1e-9)


def test_gap_of_a_subspace_with_itself_vanishes():
    E = Subspace(np.random.default_rng(0).normal(size=(5, 2)), "l1")
    assert gap(E, E) < 1e-12


@given(st.integers(2, 5), st.integers(0, 10 ** 6), st.sampled_from(NORMS))
def test_gap_sandwich_and_asymmetry_on_sampled_values(d, seed, kind):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, d))
    E = Subspace(rng.normal(size=(d, k)), kind)
    F = Subspace(E.basis + rng.uniform(0.01, 1.0) * rng.normal(size=(d, k)), kind)
    r = gap_report(E, F, samples=256, seed=seed, refine=False)
    assert r.sandwich_holds()
    assert r.asymmetry_holds(k) in (None, True)


def test_unit_ball_volume_oracles():
    assert float(unit_ball_volume(coordinate_subspace(4, [0, 1, 2], "l2"))) == pytest.approx(4 * math.pi / 3)
    assert float(unit_ball_volume(coordinate_subspace(4, [0, 1, 2], "l1"))) == pytest.approx(8 / 6)
    assert float(unit_ball_volume(coordinate_subspace(4, [0, 1, 2], "linf"))) == pytest.approx(8.0)
    assert float(unit_ball_volume(coordinate_subspace(3, [0, 1], "l1"))) == pytest.approx(2.0)
    assert euclidean_ball_volume(4) == pytest.approx(math.pi ** 2 / 2)


def test_monte_carlo_volume_agrees_with_polytope():
    rng = np.random.default_rng(2)
    M = rng.normal(size=(4, 2))
    exact, _ = ball_volumes(M, Norm("l1"), "polytope")
    mc, se = ball_volumes(M, Norm("l1"), "monte_carlo", samples=200_000)
    assert abs(mc[0] - exact[0]) <= 4 * se[0]


def test_method_norm_mismatch_is_unsupported():
    with pytest.raises(UnsupportedMethod):
        ball_volumes(np.eye(3)[:, :2], Norm("l1"), "exact")
    with pytest.raises(UnsupportedMethod):
        ball_volumes(np.eye(3)[:, :2], Norm("l2"), "polytope")


def test_det_on_coordinate_plane_is_product_of_entries():
    A = np.diag([2.0, 3.0, 5.0])
    for kind in NORMS:
        assert det_on_subspace(A, coordinate_subspace(3, [0, 1], kind)) == pytest.approx(6.0)


def test_determinant_depends_on_the_norm():
    d1, d2 = norm_dependence_witness()
    assert d1 == pytest.approx(2.5)
    assert d2 == pytest.approx(math.sqrt(13 / 2))


def test_det_vanishes_when_not_injective():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert det_on_subspace(A, Subspace([[1.0], [-1.0]])) == 0.0


@given(st.integers(2, 6), st.integers(0, 10 ** 6))
def test_det_multiplicativity_euclidean(d, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, d + 1))
    E = Subspace(rng.normal(size=(d, k)))
    rep = det_properties_check(rng.normal(size=(d, d)), rng.normal(size=(d, d)), E)
    assert rep.multiplicativity_residual <= 1e-10
    assert rep.ok


@pytest.mark.parametrize("kind", ["l1", "linf"])
def test_det_multiplicativity_polyhedral(kind):
    rng = np.random.default_rng(4)
    E = Subspace(rng.normal(size=(3, 2)), kind)
    rep = det_properties_check(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), E)
    assert rep.multiplicativity_residual <= 1e-10


def test_splitting_projection_norm_for_two_lines():
    th = 0.3
    P = projection_from_splitting(line(0.0), line(th))
    assert P.operator_norm == pytest.approx(1 / math.sin(th), rel=1e-9)
    v = np.array([0.3, -0.7])
    assert np.allclose(P(v) + P.complement()(v), v)


def test_splitting_sandwich_constant_is_finite():
    C, n = calibrate_splitting_constant(2, trials=100)
    assert 1.0 <= C < 10.0 and n == 100


def test_det_continuity_is_linear_in_small_perturbations():
    rng = np.random.default_rng(1)
    A1 = np.eye(3) * 2 + 0.1 * rng.normal(size=(3, 3))
    A2 = A1 + 0.05 * rng.normal(size=(3, 3))
    E = Subspace(rng.normal(size=(3, 2)))
    rep = det_continuity_modulus(A1, A2, E, E, sweep=(0.1, 0.01, 0.001))
    assert rep.precondition_ok and rep.linear
    assert np.isfinite(rep.fitted_L)
