"""Pipeline runners behind the command line.  Each fills an OutputDir and
returns the list of failed invariants (empty on success)."""
from __future__ import annotations

import numpy as np

from .config import ExperimentConfig, build_configured_system
from .reports import OutputDir, envelope


class PipelineFailure(RuntimeError):
    """A pipeline raised; carries module.operation provenance."""

    def __init__(self, where: str, error: Exception):
        super().__init__(f"{where}: {error!r}")
        self.where = where
        self.error = error


def _guard(where, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except Exception as e:          # provenance for the exit report
        raise PipelineFailure(where, e) from e


def run_spectrum(cfg: ExperimentConfig, out: OutputDir) -> list:
    from .oseledets import qr_spectrum, volume_exponent_check
    from .systems import sum_positive_exponents
    s = build_configured_system(cfg)
    b = cfg.budget()
    x = np.asarray(s.initial_state, dtype=float)
    sp = _guard("oseledets.qr_spectrum", qr_spectrum, s, s.base(), x, int(b["n"]), n_burn=int(b["n_burn"]))
    vol = _guard("oseledets.volume_exponent_check", volume_exponent_check, s, s.base(), x, int(b["n"]), sp)
    failed = []
    expected = sum_positive_exponents(s)
    payload = {"system": s.name, "spectrum": sp.to_json(), "sum_positive": sp.sum_positive,
               "sum_positive_stderr": sp.sum_positive_stderr(), "volume_check": vol,
               "closed_form_sum_positive": expected}
    if vol["relative_error"] > 1e-2:
        failed.append("oseledets.volume_exponent_check: relative error above 1e-2")
    out.json("report.json", envelope(cfg, {**payload, "failed": failed}))
    out.csv("spectrum.csv", ["index", "exponent", "stderr"],
            [(i, v, e) for i, (v, e) in enumerate(zip(sp.raw, sp.raw_stderr))])
    return failed


def run_manifold(cfg: ExperimentConfig, out: OutputDir) -> list:
    from .oseledets import field_at
    from .unstable_manifolds import iterate_to_unstable, tangent_check
    s = build_configured_system(cfg)
    b = cfg.budget()
    w = int(b["window"])
    burn = 0 if s.fixed_point is not None and s.name == "quadratic_model" else 500
    x0 = s.fixed_point if burn == 0 else s.initial_state
    f = _guard("oseledets.field_at", field_at, s, s.base(), x0, back=w, fwd=w, n_burn=burn)
    r = _guard("unstable_manifolds.iterate_to_unstable", iterate_to_unstable, s, f, 0, int(b["iterations"]),
               float(b["radius"]), float(b["spacing"]))
    g = r.graph
    tc = _guard("unstable_manifolds.tangent_check", tangent_check, s, f, 0, g, len(g.values) // 2)
    failed = [] if r.converged else ["unstable_manifolds.iterate_to_unstable: chains did not contract"]
    out.json("report.json", envelope(cfg, {"system": s.name, "k_u": g.k_u, "nodes": len(g.values),
                                           "contraction_rate": r.rate, "distances": r.distances,
                                           "tangent_check": tc, "failed": failed}))
    out.csv("graph.csv", [f"u{i}" for i in range(g.k_u)] + [f"g{j}" for j in range(g.values.shape[1])],
            [list(a) + list(v) for a, v in zip(g.nodes(), g.values)])
    return failed


def _stack(cfg, s):
    from .entropy import stack_for_entropy, supports_full_circle_stack
    from .oseledets import attractor_cloud, field_at
    from .unstable_manifolds import build_stack
    b = cfg.budget("stack")
    if supports_full_circle_stack(s):
        return _guard("unstable_manifolds.build_stack", stack_for_entropy, s, int(b["points"]),
                      float(b["spacing"]), int(b["iterations"]), cfg.seed + 3)
    w = int(b["window"])
    cf = _guard("oseledets.field_at", field_at, s, s.base(), s.initial_state, back=w, fwd=w)
    W = attractor_cloud(s, s.base(), int(b["points"]), w, w, seed=cfg.seed + 3)
    return _guard("unstable_manifolds.build_stack", build_stack, s, W, cf, 0, radius=0.05,
                  spacing=float(b["spacing"]), k=int(b["iterations"]))


def _stack_rows(st):
    rows = []
    for i, l in enumerate(st.leaves):
        for a, v in zip(l.nodes(), l.values):
            rows.append([i] + list(a) + list(v))
    return rows


def run_stack(cfg: ExperimentConfig, out: OutputDir) -> list:
    s = build_configured_system(cfg)
    st = _stack(cfg, s)
    ok = st.identical_or_disjoint()
    failed = [] if ok else ["unstable_manifolds.build_stack: leaves neither identical nor disjoint"]
    out.json("report.json", envelope(cfg, {"system": s.name, "leaves": len(st.leaves), "radius": st.radius,
                                           "period": st.period, "tolerance": st.tolerance,
                                           "multiplicity": st.multiplicity, "dropped": len(st.dropped),
                                           "identical_or_disjoint": ok, "info": st.info, "failed": failed}))
    k = st.center.k_u
    out.csv("stack.csv", ["leaf"] + [f"u{i}" for i in range(k)] + [f"g{j}" for j in range(st.center.k_cs)],
            _stack_rows(st))
    return failed


def run_srb(cfg: ExperimentConfig, out: OutputDir) -> list:
    from .entropy import supports_full_circle_stack
    from .oseledets import field_at
    from .srb import conditional_comparison, empirical_srb, leaf_density, stack_leaf_density
    s = build_configured_system(cfg)
    b = cfg.budget()
    E = _guard("srb.empirical_srb", empirical_srb, s, int(b["n_burn"]), int(b["n_orbits"]),
               int(b["n_samples"]), cfg.seed)
    probe = E.invariance_probe(s)
    failed = [] if probe["ok"] else ["srb.empirical_srb: invariance probe above 3 standard errors"]
    f = _guard("oseledets.field_at", field_at, s, s.base(), s.initial_state, back=150, fwd=150)
    h = 1e-3 if f.k_u == 1 else 1e-2
    _, K, _, q = _guard("srb.leaf_density", leaf_density, s, f, 0, 0.05, h, int(b["N_max"]))
    payload = {"system": s.name, "samples": int(E.samples.shape[0] * E.samples.shape[1]),
               "invariance_probe": probe, "distortion": K.to_json(), "density_integral": q.integral}
    if supports_full_circle_stack(s):
        st = _stack(cfg, s)
        dens = [_guard("srb.stack_leaf_density", stack_leaf_density, s, st, i, int(b["N_max"]))[2]
                for i in range(len(st.leaves))]
        cmp_ = _guard("srb.conditional_comparison", conditional_comparison, s, st, E.points(), dens, int(b["bins"]))
        cmp_.pop("bundles", None)
        payload["conditional_comparison"] = cmp_
        if cmp_.get("status") == "ok" and cmp_["l1"] > 0.1:
            failed.append("srb.conditional_comparison: L1 distance above 0.1")
    payload["failed"] = failed
    out.json("report.json", envelope(cfg, payload))
    out.csv("density.csv", [f"u{i}" for i in range(q.leaf.k_u)] + ["q"],
            [list(a) + [v] for a, v in zip(q.leaf.nodes(), q.values)])
    masses, _ = E.masses(s, E.samples)
    out.csv("coarse_masses.csv", ["bin", "mass"], list(enumerate(masses.mean(axis=0))))
    return failed


def run_entropy(cfg: ExperimentConfig, out: OutputDir) -> list:
    from .entropy import entropy_formula_report
    s = build_configured_system(cfg)
    b = cfg.budget()
    c = {"n_orbits": int(b["n_orbits"]), "n_samples": int(b["n_samples"]), "n_burn": int(b["n_burn"]),
         "n_spectrum": int(b["n_spectrum"]), "max_horizon": int(b["max_horizon"]),
         "min_occupancy": float(b["min_occupancy"]), "bootstrap": int(b["bootstrap"])}
    rep = _guard("entropy.entropy_formula_report", entropy_formula_report, s, c, cfg.seed)
    failed = [f"{f['pipeline']}: {f['error']}" for f in rep.failures]
    if rep.flags.get("ruelle") is False:
        failed.append("entropy.entropy_formula_report: Ruelle inequality violated beyond 3 sigma")
    if rep.flags.get("pesin") is False:
        failed.append("entropy.entropy_formula_report: estimates disagree beyond combined 3 sigma")
    out.json("report.json", envelope(cfg, {**rep.to_json(), "failed": failed}))
    h = rep.h_conditional
    out.csv("entropy.csv", ["system", "h_conditional", "h_stderr", "sum_positive", "sum_positive_stderr",
                            "birkhoff_logJu", "birkhoff_stderr", "pesin"],
            [[s.name, h.value if h else "", h.stderr if h else "", rep.sum_positive, rep.sum_positive_stderr,
              rep.birkhoff.value if rep.birkhoff else "", rep.birkhoff.stderr if rep.birkhoff else "",
              "pass" if rep.flags.get("pesin") else "fail"]])
    return failed


def run_verify(cfg: ExperimentConfig, out: OutputDir) -> list:
    from .acceptance import run_criteria
    results = run_criteria(cfg.criteria or None, seed=cfg.seed)
    failed = [f"acceptance.{r.name}: {r.reason}" for r in results if not r.passed]
    out.json("report.json", envelope(cfg, {"criteria": [r.to_json() for r in results], "failed": failed}))
    out.csv("summary.csv", ["criterion", "name", "expected", "observed", "tolerance", "verdict"],
            [r.row() for r in results])
    return failed


RUNNERS = {"spectrum": run_spectrum, "manifold": run_manifold, "stack": run_stack, "srb": run_srb,
           "entropy": run_entropy, "verify": run_verify}
