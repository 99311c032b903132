import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdslab.entropy import (LeafPartition, SubordinatePartition, _entropy_mm, birkhoff_over_samples,
                            build_subordinate_partition, conditional_entropy, entropy_formula_report,
                            entropy_with_drift, grid_partition, point_mass_control, select_horizon)
from rdslab.srb import empirical_srb
from rdslab.systems import build_system, custom_system

CAT_H = np.log((3 + np.sqrt(5)) / 2)


def _circle_map(coefs):
    # x -> sum c_k x^k on the circle
    terms = [{"coef": c, "powers": [k]} for k, c in enumerate(coefs)]
    return custom_system({"name": "circle", "maps": [[terms]], "periodic": [0], "initial_state": [0.123]})


def test_miller_madow_small_cases():
    assert _entropy_mm(np.array([0, 0, 0])) == 0.0
    assert _entropy_mm(np.array([0, 0, 1, 1])) == pytest.approx(np.log(2) + 1 / 8)
    assert _entropy_mm(np.array([0, 1]), weights=np.array([3.0, 1.0])) == pytest.approx(
        -(0.75 * np.log(0.75) + 0.25 * np.log(0.25)) + 1 / 8)


def test_miller_madow_reduces_bias():
    rng = np.random.default_rng(0)
    p = np.array([0.4, 0.3, 0.2, 0.1])
    true = -(p * np.log(p)).sum()
    est = np.array([_entropy_mm(rng.choice(4, 200, p=p)) for _ in range(400)])
    plug = est - 3 / 400
    assert abs(est.mean() - true) < abs(plug.mean() - true)
    assert abs(est.mean() - true) < 3 * est.std() / np.sqrt(len(est))


def test_constant_map_has_zero_entropy():
    s = _circle_map([0.3])
    E = empirical_srb(s, 10, 4, 500, seed=0)
    P = build_subordinate_partition(s, grid_partition(s, E, 2, axes=[0]), E, 3)
    assert conditional_entropy(P).value == 0.0


def test_circle_doubling_entropy_is_log_two():
    s = _circle_map([0.1, 2.0])
    E = empirical_srb(s, 100, 16, 5000, seed=0)
    base = grid_partition(s, E, 2, axes=[0])
    est, _ = entropy_with_drift(s, base, E, 4)
    assert est.value == pytest.approx(np.log(2), abs=max(3 * est.stderr, 1e-3))


def test_point_mass_control_has_strict_gap():
    c = point_mass_control(build_system("solenoid_varexp"), n_spectrum=20_000, samples=2000)
    assert c["h"] == 0.0
    assert c["strict_gap"]


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(0, 5))
def test_codes_refine_with_horizon(seed, ubins, H):
    rng = np.random.default_rng(seed)
    leaf = rng.integers(-1, 3, size=(3, 40))
    base = LeafPartition(leaf, rng.integers(0, ubins, size=leaf.shape), ubins, "stack")
    P = SubordinatePartition(base, H, base.symbols(), None)
    assert P.prefix_property()
    # on common samples, each horizon-(H+1) atom sits inside one horizon-H atom
    T = np.arange(H + 1, 40)
    a = np.stack(P._columns(T, H), -1).reshape(-1, H + 1)
    b = np.stack(P._columns(T, H + 1), -1).reshape(-1, H + 2)
    ub, ib = np.unique(b, axis=0, return_inverse=True)
    assert len(np.unique(a, axis=0)) <= len(ub)
    for k in range(len(ub)):
        assert len(np.unique(a[ib.ravel() == k], axis=0)) == 1


@pytest.fixture(scope="module")
def cat():
    s = build_system("cat_map")
    return s, empirical_srb(s, 100, 32, 4000, seed=0)


def test_horizon_scan_is_nonincreasing_within_noise(cat):
    s, E = cat
    base = grid_partition(s, E, 2)
    H, scan = select_horizon(s, base, E, 6, min_median_occupancy=50)
    assert H >= 2
    vals = [v for _, v in scan]
    assert all(b <= a + 0.02 for a, b in zip(vals, vals[1:]))


def test_birkhoff_average_for_linear_map(cat):
    s, E = cat
    B = birkhoff_over_samples(s, E)
    assert B.value == pytest.approx(CAT_H, abs=1e-10)


def test_report_on_cat_map(cat):
    s, _ = cat
    rep = entropy_formula_report(s, {"n_orbits": 32, "n_samples": 4000, "n_spectrum": 20_000, "bootstrap": 16})
    h = rep.h_conditional
    assert not rep.failures
    assert rep.flags["ruelle"]
    assert abs(h.value - CAT_H) <= 3 * h.stderr + 0.02
    assert rep.sum_positive == pytest.approx(CAT_H, abs=1e-3)
    assert any("grid" in a for a in rep.assumptions)
    line = rep.csv_line()
    assert line.startswith("cat_map,") and line.endswith("\r\n")


def test_refining_the_base_partition_does_not_lower_entropy(cat):
    s, E = cat
    coarse, _ = entropy_with_drift(s, grid_partition(s, E, 2), E, 3, bootstrap=16)
    fine, _ = entropy_with_drift(s, grid_partition(s, E, 4), E, 1, bootstrap=16)
    assert fine.value >= coarse.value - 3 * np.hypot(coarse.stderr, fine.stderr)


def test_entropy_per_step_is_stable_in_n(cat):
    s, E = cat
    base = grid_partition(s, E, 2)
    one, _ = entropy_with_drift(s, base, E, 3, n=1, bootstrap=16)
    two, _ = entropy_with_drift(s, base, E, 3, n=2, bootstrap=16)
    assert abs(one.value - two.value) <= 3 * np.hypot(one.stderr, two.stderr)
