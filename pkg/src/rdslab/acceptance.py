"""The acceptance suite: twelve numbered checks with fixed default seeds.

Each check returns a CriterionResult.  Wall-clock limits count towards the
verdict, but measured times are kept out of the JSON so that reports stay
byte-identical between runs.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

LOG2 = math.log(2.0)
DIAG = (0.5 * (math.log(3) + math.log(2)), 0.5 * (math.log(1 / 3) + math.log(0.25)))
CAT = math.log((3 + math.sqrt(5)) / 2)


@dataclass
class CriterionResult:
    number: int
    name: str
    expected: str
    observed: str
    tolerance: str
    passed: bool
    reason: str = ""
    details: dict = field(default_factory=dict)
    seconds: float = 0.0
    time_limit: float | None = None

    def to_json(self):
        return {"criterion": self.number, "name": self.name, "expected": self.expected,
                "observed": self.observed, "tolerance": self.tolerance, "passed": self.passed,
                "reason": self.reason, "time_limit_s": self.time_limit, "details": self.details}

    def row(self):
        return [self.number, self.name, self.expected, self.observed, self.tolerance,
                "pass" if self.passed else "fail"]

    def line(self) -> str:
        v = "PASS" if self.passed else "FAIL"
        return f"[{v}] {self.number:2d} {self.name}: observed {self.observed} (expected {self.expected}, " \
               f"tol {self.tolerance}) {self.seconds:.1f}s" + (f"  -- {self.reason}" if self.reason else "")


def _fmt(x, p=6):
    return f"{x:.{p}g}"


# -------------------------------------------------------------- criteria

def diag_spectrum(seed=0):
    from .oseledets import qr_spectrum
    from .systems import build_system
    s = build_system("diag_cocycle", seed)
    sp = qr_spectrum(s, s.base(), [0.0, 0.0], 100_000)
    err = np.abs(sp.raw - np.array(DIAG))
    ok = bool(err.max() <= 1e-3)
    return dict(expected=f"[{_fmt(DIAG[0])}, {_fmt(DIAG[1])}]", observed=f"[{_fmt(sp.raw[0])}, {_fmt(sp.raw[1])}]",
                tolerance="1e-3, < 5 s", passed=ok, reason="" if ok else f"max error {err.max():.2e}",
                details={"raw": sp.raw, "stderr": sp.raw_stderr, "abs_error": err}, time_limit=5.0)


def cat_exponent(seed=0):
    from .oseledets import qr_spectrum
    from .systems import build_system
    s = build_system("cat_map", seed)
    sp = qr_spectrum(s, s.base(), [0.1, 0.2], 10_000)
    err = abs(sp.raw[0] - CAT)
    ok = bool(err <= 1e-4)
    return dict(expected=_fmt(CAT), observed=_fmt(sp.raw[0], 10), tolerance="1e-4, < 1 s", passed=ok,
                reason="" if ok else f"error {err:.2e}", details={"abs_error": err}, time_limit=1.0)


def pesin_solenoid(seed=0):
    from .entropy import entropy_formula_report
    from .systems import build_system
    s = build_system("solenoid", seed)
    rep = entropy_formula_report(s, {"n_orbits": 64, "n_samples": 10_000}, seed)
    h = rep.h_conditional
    errs = {"h_conditional": abs(h.value - LOG2) if h else np.inf,
            "sum_positive": abs(rep.sum_positive - LOG2),
            "birkhoff_logJu": abs(rep.birkhoff.value - LOG2) if rep.birkhoff else np.inf}
    tol = {"h_conditional": 0.03, "sum_positive": 1e-3, "birkhoff_logJu": 1e-3}
    bad = [k for k in errs if not errs[k] <= tol[k]]
    obs = f"h={_fmt(h.value if h else np.nan, 5)}, sum={_fmt(rep.sum_positive, 6)}, " \
          f"logJu={_fmt(rep.birkhoff.value if rep.birkhoff else np.nan, 6)}"
    return dict(expected=f"log 2 = {_fmt(LOG2)}", observed=obs, tolerance="0.03 / 1e-3 / 1e-3, < 120 s",
                passed=not bad, reason=", ".join(f"{k} off by {errs[k]:.2e}" for k in bad),
                details={"report": rep.to_json(), "abs_errors": errs}, time_limit=120.0)


def srb_direction(seed=0):
    from .entropy import entropy_formula_report
    from .systems import build_system
    s = build_system("solenoid_varexp", seed)
    rep = entropy_formula_report(s, {"n_orbits": 100, "n_samples": 10_000, "compare_srb": True,
                                     "control": True}, seed)
    f = rep.flags
    cmp_ = rep.comparison or {}
    ctrl = rep.control or {}
    reasons = []
    if not f.get("pesin"):
        reasons.append("entropy estimates disagree")
    if not f.get("srb_densities_match"):
        reasons.append(f"conditional comparison failed ({cmp_.get('status')}, L1={cmp_.get('l1')})")
    if not f.get("control_strict_gap"):
        reasons.append("point-mass control shows no strict Ruelle gap")
    details = rep.to_json()
    if details.get("srb_comparison"):
        details["srb_comparison"] = {k: v for k, v in details["srb_comparison"].items() if k != "bundles"}
    obs = f"L1={_fmt(cmp_.get('l1', np.nan), 3)}, control h={_fmt(ctrl.get('h', np.nan), 3)} " \
          f"vs sum={_fmt(ctrl.get('sum_positive', np.nan), 4)}"
    return dict(expected="L1 <= 0.1 and h ~ 0 < sum > 0.5", observed=obs, tolerance="3 sigma agreement, L1 0.1",
                passed=not reasons, reason="; ".join(reasons), details=details)


def quadratic_manifold(seed=0):
    from .oseledets import field_at
    from .systems import build_system
    from .unstable_manifolds import iterate_to_unstable
    s = build_system("quadratic_model", seed)
    f = field_at(s, s.base(), s.fixed_point, back=100, fwd=60, n_burn=0)
    r = iterate_to_unstable(s, f, 0, 40, 0.5, 1e-3)
    a = r.graph.nodes()[:, 0]
    err = float(np.abs(r.graph.values[:, 0] - 2 * a ** 2 / 7).max())
    ok = err <= 1e-6
    return dict(expected="g(u) = 2u^2/7", observed=f"sup error {err:.2e}", tolerance="1e-6, < 5 s", passed=ok,
                reason="" if ok else "graph too far from the closed form",
                details={"sup_error": err, "rate": r.rate, "nodes": len(a)}, time_limit=5.0)


def _hyperbolic_fields(seed, window=150):
    from .oseledets import field_at
    from .systems import HYPERBOLIC, build_system
    for name in HYPERBOLIC:
        s = build_system(name, seed)
        yield name, s, field_at(s, s.base(), s.initial_state, back=window, fwd=window)


def graph_contraction(seed=0):
    from .unstable_manifolds import contraction_ratios
    worst = {}
    for name, s, f in _hyperbolic_fields(seed):
        n = 41 if f.k_u == 1 else 11
        worst[name] = float(contraction_ratios(s, f, 0, 0.05, n, 100, seed=seed + 1).max())
    m = max(worst.values())
    ok = m <= 0.95
    return dict(expected="sup ratio <= 0.95", observed=f"max {m:.3f}", tolerance="0.95", passed=ok,
                reason="" if ok else "transform not contracting", details={"max_ratio": worst})


def change_of_variables(seed=0):
    from .oseledets import field_at
    from .srb import image_leaf_pair, pushforward_density_check
    from .systems import HYPERBOLIC, build_system
    exact, mc = {}, {}
    for name in list(HYPERBOLIC) + ["quadratic_model"]:
        s = build_system(name, seed)
        fixed = name == "quadratic_model"
        f = field_at(s, s.base(), s.fixed_point if fixed else s.initial_state, back=150, fwd=150,
                     n_burn=0 if fixed else 500)
        W, W2 = image_leaf_pair(s, f, 0, 0.05, 1e-3 if f.k_u == 1 else 1e-2)
        sym = f.window.symbol(0)
        exact[name] = pushforward_density_check(s, sym, W, W2, norm="l2").max_rel_error
        nm = s.ambient_norm if not s.ambient_norm.euclidean else "l1"
        mc[name] = pushforward_density_check(s, sym, W, W2, norm=nm, method="monte_carlo", seed=seed).max_rel_error
    e, m = max(exact.values()), max(mc.values())
    ok = e <= 1e-6 and m <= 1e-2
    return dict(expected="relative error", observed=f"euclidean {e:.2e}, monte carlo {m:.2e}",
                tolerance="1e-6 / 1e-2", passed=ok, reason="" if ok else "pushforward mismatch",
                details={"euclidean": exact, "monte_carlo": mc})


def subspace_geometry(seed=0, pairs=10_000, triples=1000):
    """Gap sandwich and asymmetry bound on random pairs; det multiplicativity on random triples.

    Euclidean-type norms take most pairs (their sphere supremum is exact);
    the polyhedral norms get 10% each with sampled candidates only.
    """
    from .norm_geometry import Norm, Subspace, det_properties_check, gap_report
    rng = np.random.default_rng(seed)
    n_poly = pairs // 10
    norms = ["l1"] * n_poly + ["linf"] * n_poly + ["l2"] * ((pairs - 2 * n_poly) // 2)
    norms += ["weighted"] * (pairs - len(norms))
    sandwich_bad = asym_bad = asym_checked = 0
    for i, kind in enumerate(norms):
        d = int(rng.integers(2, 7))
        k = int(rng.integers(1, d))
        nm = Norm("weighted", tuple(rng.uniform(0.5, 2.0, d))) if kind == "weighted" else Norm(kind)
        E = Subspace(rng.normal(size=(d, k)), nm)
        F = Subspace(rng.normal(size=(d, k)) if rng.random() < 0.5 else
                     E.basis + 0.05 * rng.normal(size=(d, k)), nm)
        r = gap_report(E, F, samples=256, seed=i, refine=False)
        sandwich_bad += not r.sandwich_holds()
        a = r.asymmetry_holds(k)
        if a is not None:
            asym_checked += 1
            asym_bad += not a
    worst = 0.0
    for _ in range(triples):
        d = int(rng.integers(2, 7))
        k = int(rng.integers(1, d + 1))
        E = Subspace(rng.normal(size=(d, k)), "l2")
        rep = det_properties_check(rng.normal(size=(d, d)), rng.normal(size=(d, d)), E)
        worst = max(worst, rep.multiplicativity_residual)
    ok = sandwich_bad == 0 and asym_bad == 0 and worst <= 1e-10
    return dict(expected="no violations, residual <= 1e-10",
                observed=f"{sandwich_bad} sandwich / {asym_bad} asymmetry violations, residual {worst:.1e}",
                tolerance="exact / 1e-10", passed=ok, reason="" if ok else "geometry inequality violated",
                details={"pairs": pairs, "asymmetry_checked": asym_checked, "triples": triples,
                         "max_multiplicativity_residual": worst})


def adapted_norms(seed=0):
    from .oseledets import field_rate_constants, verify_hyperbolic_estimates
    out, bad = {}, []
    for name, s, f in _hyperbolic_fields(seed, 200):
        lam0, eps0, _ = field_rate_constants(f)
        lo, hi = f.valid_range(41)
        idx = list(np.linspace(lo, hi - 7, 20).astype(int))
        rep = verify_hyperbolic_estimates(f, idx, 40, lam0, eps0, probes=50, seed=seed)
        out[name] = {"probes": rep.n_probes, "ok": rep.ok, "max_defect_over_tail": rep.max_defect_ratio}
        if not rep.ok or rep.max_defect_ratio > 1:
            bad.append(name)
    return dict(expected="inequalities hold, defect <= tail", observed=f"{len(bad)} systems failing",
                tolerance="1e3 probes per system", passed=not bad, reason=", ".join(bad), details=out)


def distortion(seed=0):
    from .srb import leaf_density, reference_change_residual
    from .oseledets import field_at
    from .systems import HYPERBOLIC, build_system
    out = {}
    for name in list(HYPERBOLIC) + ["quadratic_model"]:
        s = build_system(name, seed)
        fixed = name == "quadratic_model"
        f = field_at(s, s.base(), s.fixed_point if fixed else s.initial_state, back=150, fwd=150,
                     n_burn=0 if fixed else 500)
        tower, K, _, _ = leaf_density(s, f, 0, 0.05, 1e-3 if f.k_u == 1 else 1e-2)
        nodes = tower.graphs[0].nodes()
        res = reference_change_residual(s, tower, nodes[0], nodes[-1])
        out[name] = {"rho": K.tail_rate, "degenerate": K.degenerate, "converged": K.converged, "residual": res}
    rho = max(v["rho"] for v in out.values())
    res = max(v["residual"] for v in out.values())
    ok = rho <= 0.9 and res <= 1e-8 and all(v["converged"] for v in out.values())
    return dict(expected="rho <= 0.9, residual <= 1e-8", observed=f"max rho {rho:.3f}, residual {res:.1e}",
                tolerance="0.9 / 1e-8", passed=ok, reason="" if ok else "distortion tail too slow", details=out)


def jacobian_consistency(seed=0, probes=100, steps=3):
    from .rds_core import DomainEscape, burn_in, derivative_cocycle, finite_difference_cocycle
    from .systems import BUILTINS, build_system
    rng = np.random.default_rng(seed)
    out = {}
    for name in BUILTINS:
        s = build_system(name, seed)
        worst = 0.0
        for _ in range(probes):
            om = s.base(int(rng.integers(0, 10_000)))
            x0 = np.asarray(s.initial_state, float) + rng.uniform(-0.5, 0.5, s.dim) * 0.2
            x = x0
            if s.periodic or s.domain_center is not None:
                try:
                    om, x = burn_in(s, om, x0, 50)
                except DomainEscape:
                    x = x0      # no bounded attractor: probe near the initial state
            D = derivative_cocycle(s, om, x, steps)
            F = finite_difference_cocycle(s, om, x, steps)
            worst = max(worst, float(np.abs(D - F).max() / np.abs(D).max()))
        out[name] = worst
    m = max(out.values())
    ok = m <= 1e-4
    return dict(expected="relative error", observed=f"max {m:.1e}", tolerance="1e-4", passed=ok,
                reason="" if ok else "jacobian disagrees with finite differences", details=out)


DETERMINISM_SUBSET = ("diag_spectrum", "cat_exponent", "quadratic_manifold", "jacobian_consistency")


def determinism(seed=0):
    """Two in-process runs of verify (on a fast subset of criteria) must write identical bytes."""
    import os
    import shutil
    import tempfile

    from .cli import run
    from .config import ExperimentConfig
    digests = []
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "verify")
        cfg = ExperimentConfig.from_dict({"system": {"name": "diag_cocycle"}, "pipeline": "verify",
                                          "seed": seed, "output": out, "criteria": list(DETERMINISM_SUBSET)})
        for _ in range(2):
            run(cfg, quiet=True)
            files = {}
            for name in sorted(os.listdir(out)):
                with open(os.path.join(out, name), "rb") as fh:
                    files[name] = fh.read()
            digests.append(files)
            shutil.rmtree(out)
    same = digests[0] == digests[1] and len(digests[0]) > 0
    return dict(expected="byte-identical reports", observed="identical" if same else "different",
                tolerance="exact", passed=same, reason="" if same else "reports differ",
                details={"files": sorted(digests[0]), "criteria": list(DETERMINISM_SUBSET)})


CRITERIA = [
    (1, "diag_spectrum", diag_spectrum),
    (2, "cat_exponent", cat_exponent),
    (3, "pesin_solenoid", pesin_solenoid),
    (4, "srb_direction", srb_direction),
    (5, "quadratic_manifold", quadratic_manifold),
    (6, "graph_contraction", graph_contraction),
    (7, "change_of_variables", change_of_variables),
    (8, "subspace_geometry", subspace_geometry),
    (9, "adapted_norms", adapted_norms),
    (10, "distortion", distortion),
    (11, "jacobian_consistency", jacobian_consistency),
    (12, "determinism", determinism),
]


def criterion_names():
    return [n for _, n, _ in CRITERIA]


def resolve(selection) -> list:
    """Criteria by number or name."""
    if not selection:
        return list(CRITERIA)
    out = []
    for sel in selection:
        sel = str(sel)
        hit = [c for c in CRITERIA if sel == c[1] or sel == str(c[0])]
        if not hit:
            raise KeyError(f"unknown criterion {sel!r}; choose from {criterion_names()}")
        out += [c for c in hit if c not in out]
    return sorted(out)


def run_criterion(number, name, fn, seed=0) -> CriterionResult:
    t0 = time.perf_counter()
    try:
        r = fn(seed)
    except Exception as e:
        return CriterionResult(number, name, "", "error", "", False, f"{type(e).__name__}: {e}",
                               seconds=time.perf_counter() - t0)
    dt = time.perf_counter() - t0
    res = CriterionResult(number, name, seconds=dt, **r)
    if res.time_limit is not None and dt > res.time_limit:
        res.passed = False
        res.reason = (res.reason + "; " if res.reason else "") + f"over the {res.time_limit:g} s limit"
    return res


def run_criteria(selection=None, seed=0, echo=None) -> list:
    out = []
    for number, name, fn in resolve(selection):
        r = run_criterion(number, name, fn, seed)
        if echo:
            echo(r.line())
        out.append(r)
    return out


def summary_table(rows) -> str:
    """Aligned text table from CriterionResults or their row lists."""
    head = ["#", "criterion", "expected", "observed", "tolerance", "verdict"]
    rows = [[str(c) for c in (r.row() if hasattr(r, "row") else r)] for r in rows]
    w = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = "  ".join(f"{{:<{n}}}" for n in w)
    return "\n".join([fmt.format(*head), fmt.format(*["-" * n for n in w])] + [fmt.format(*r) for r in rows])
