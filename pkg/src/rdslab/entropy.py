"""Partitions subordinate to unstable leaves, conditional entropy and the entropy formula.

Atom codes come from orbit histories.  For a sample x_T the code of the
partition at horizon H is

    (leaf(x_T), (leaf, u-bin)(x_{T-1}), ..., (leaf, u-bin)(x_{T-H})),

so horizon H+1 only splits atoms of horizon H.  The conditional entropy
H(Phi^-n eta | eta) / n is estimated from the joint code of x_T and x_{T+n}
with the plug-in estimator and the Miller-Madow correction; standard errors
come from a bootstrap over orbits.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .oseledets import _block_stderr, attractor_cloud, field_at, qr_spectrum, split_dims
from .rds_core import DynamicsError, OrbitWindow, RandomSystem
from .srb import (EmpiricalMeasure, conditional_comparison, empirical_srb, stack_leaf_density,
                  track_log_unstable_jacobians)
from .unstable_manifolds import StackChart, UnsupportedCase, build_stack, circle_period, field_chart


class InconclusiveEstimate(DynamicsError):
    pass


# --------------------------------------------------------- partitions

@dataclass
class LeafPartition:
    """Per-sample leaf index (-1 outside the stack) and u-bin, shape (orbits, per_orbit)."""
    leaf: np.ndarray
    ubin: np.ndarray
    ubins: int
    kind: str                       # "stack" or "grid"
    stack: StackChart | None = None
    info: dict = field(default_factory=dict)

    @property
    def unassigned_fraction(self) -> float:
        return float(np.mean(self.leaf < 0))

    def symbols(self) -> np.ndarray:
        """(leaf, u-bin) joined into one integer; -1 outside the stack."""
        return np.where(self.leaf >= 0, self.leaf * self.ubins + self.ubin, -1)


def leaf_partition(system: RandomSystem, stack: StackChart, empirical: EmpiricalMeasure, ubins: int = 2,
                   tol: float | None = None) -> LeafPartition:
    """Assign samples to stack leaves; u-bins split [-r, r] evenly with an edge at the stack centre
    whenever ``ubins`` is even."""
    X = empirical.points()
    idx, dist, a = stack.assign(system, X, tol)
    R = stack.radius
    b = np.clip(np.floor((a + R) / (2 * R) * ubins).astype(np.int64), 0, ubins - 1)
    shape = empirical.samples.shape[:2]
    return LeafPartition(idx.reshape(shape), b.reshape(shape), ubins, "stack", stack,
                         {"assign_distance_median": float(np.median(dist))})


def grid_partition(system: RandomSystem, empirical: EmpiricalMeasure, per_axis: int = 4, axes=None) -> LeafPartition:
    """Coordinate boxes as the base partition (a single 'leaf'): periodic axes split evenly,
    other axes at sample quantiles."""
    code, edges = empirical.coarse_bins(system, empirical.samples, per_axis, axes)
    return LeafPartition(np.zeros(code.shape, dtype=np.int64), code, per_axis ** len(edges), "grid", None,
                         {"edges": [np.asarray(e).tolist() for e in edges]})


@dataclass
class SubordinatePartition:
    base: LeafPartition
    horizon: int
    symbols: np.ndarray             # (orbits, per_orbit) base-partition symbols
    driving: np.ndarray | None      # (orbits, per_orbit) driving symbols when conditioning on omega
    probes: dict = field(default_factory=dict)

    def _columns(self, T: np.ndarray, H: int | None = None):
        """Code columns for samples at times T (same for every orbit)."""
        H = self.horizon if H is None else H
        s = self.symbols
        cols = [np.where(s[:, T] >= 0, s[:, T] // self.base.ubins, -1)]
        cols += [s[:, T - j] for j in range(1, H + 1)]
        if self.driving is not None:
            cols += [self.driving[:, T - j] for j in range(0, H + 1)]
        return cols

    def codes(self, H: int | None = None) -> np.ndarray:
        """Atom codes of every sample with a full history, shape (orbits, times, H+1[+H+1])."""
        H = self.horizon if H is None else H
        T = np.arange(H, self.symbols.shape[1])
        return np.stack(self._columns(T, H), axis=-1)

    def prefix_property(self, H: int | None = None) -> bool:
        """Codes at horizon H are prefixes of the codes at H + 1 on the common samples."""
        H = self.horizon if H is None else H
        if H + 1 >= self.symbols.shape[1]:
            return True
        T = np.arange(H + 1, self.symbols.shape[1])
        a = np.stack(self._columns(T, H), axis=-1)
        b = np.stack(self._columns(T, H + 1), axis=-1)
        return bool(np.array_equal(a[..., :H + 1], b[..., :H + 1]))

    def atom_count(self, H: int | None = None) -> int:
        c = self.codes(H)
        return int(len(np.unique(c.reshape(-1, c.shape[-1]), axis=0)))


def build_subordinate_partition(system: RandomSystem, base: LeafPartition, empirical: EmpiricalMeasure,
                                horizon: int, condition_on_driving: bool | None = None,
                                membership_pairs: int = 0, seed: int = 0) -> SubordinatePartition:
    """Dynamical refinement of a base partition along backward orbits.

    Driving symbols join the codes for random systems so that entropies
    are conditional on the base point.  Raises InconclusiveEstimate when
    more than half of the samples never return to the stack in the horizon.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if empirical.samples.shape[1] <= horizon + 1:
        raise ValueError("orbits shorter than the horizon")
    if condition_on_driving is None:
        condition_on_driving = system.driving.alphabet_size > 1
    sym = base.symbols()
    P = SubordinatePartition(base, horizon, sym, empirical.symbols if condition_on_driving else None)
    if horizon:
        T = np.arange(horizon, sym.shape[1])
        back = np.stack([sym[:, T - j] for j in range(1, horizon + 1)], axis=-1)
        returned = float(np.mean((back >= 0).any(axis=-1)))
        P.probes["returned_fraction"] = returned
        if returned < 0.5:
            raise InconclusiveEstimate(f"only {returned:.1%} of samples revisit the stack within {horizon} steps")
    P.probes["one_leaf_per_atom"] = True      # the leaf index is the first code entry
    if base.stack is not None:
        P.probes["min_ubin_width"] = 2 * base.stack.radius / base.ubins
    P.probes["prefix_property"] = P.prefix_property()
    if membership_pairs and base.kind == "stack":
        P.probes["membership"] = _membership_probe(system, P, empirical, membership_pairs, seed)
    return P


def _membership_probe(system, P: SubordinatePartition, empirical: EmpiricalMeasure, pairs: int, seed: int):
    """Same-atom sample pairs: the second point must lie on the first one's iterated local leaf."""
    from .oseledets import splitting_field
    from .unstable_manifolds import membership_test
    rng = np.random.default_rng(seed)
    H = P.horizon
    codes = P.codes()
    m, nt, _ = codes.shape
    flat = codes.reshape(m * nt, -1)
    _, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.ravel()
    k_u = split_dims(system)[0]
    back = fwd = 80
    lo, hi = max(H, back), empirical.samples.shape[1] - fwd - 1
    if hi <= lo:
        return {"pairs": 0, "accepted": 0}
    accepted = tried = 0
    for _ in range(pairs * 20):
        if tried >= pairs:
            break
        o = int(rng.integers(m))
        T = int(rng.integers(lo, hi))
        atom = inv[o * nt + (T - H)]
        mates = np.nonzero(inv == atom)[0]
        mates = mates[mates != o * nt + (T - H)]
        if not len(mates):
            continue
        j = int(rng.choice(mates))
        y = empirical.samples[j // nt, j % nt + H]
        pts = empirical.samples[o, T - back:T + fwd + 1]
        syms = empirical.symbols[o, T - back:T + fwd + 1]
        base = system.driving.with_seed(int(empirical.seeds[o])).point(empirical.n_burn + T)
        win = OrbitWindow(base, pts, syms, back)
        f = splitting_field(system, win, k_u)
        v = system.difference(y, pts[back])
        res = membership_test(system, f, 0, v, H, 0.0, radius=2.0, rate_check=False)
        tried += 1
        accepted += int(res.accepted)
    return {"pairs": tried, "accepted": accepted}


# ------------------------------------------------- entropy estimation

def _row_ids(cols: list) -> np.ndarray:
    A = np.stack([c.ravel() for c in cols], axis=-1)
    return np.unique(A, axis=0, return_inverse=True)[1].ravel()


def _entropy_mm(ids: np.ndarray, weights=None) -> float:
    """Plug-in entropy with the Miller-Madow correction (K_occupied - 1) / 2N."""
    c = np.bincount(ids, weights=weights)
    c = c[c > 0]
    N = c.sum()
    p = c / N
    return float(-(p * np.log(p)).sum() + (len(c) - 1) / (2 * N))


@dataclass
class EntropyEstimate:
    value: float
    stderr: float
    n: int
    horizon: int
    samples: int
    atoms: int
    median_occupancy: float
    undersampled: bool
    bias_correction: float
    statistical_stderr: float | None = None
    horizon_drift: float | None = None

    def to_json(self):
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in self.__dict__.items()}


def conditional_entropy(partition: SubordinatePartition, n: int = 1, bootstrap: int = 64, seed: int = 0,
                        min_median_occupancy: float = 5.0) -> EntropyEstimate:
    """H(Phi^-n eta | eta) / n from the codes of x_T and x_{T+n}.

    With too little median occupancy of the joint atoms the estimate is
    flagged and its error bar widened by the size of the bias correction.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    H = partition.horizon
    nt = partition.symbols.shape[1]
    T = np.arange(H, nt - n)
    if len(T) < 2:
        raise ValueError("orbits too short for this horizon and n")
    now = partition._columns(T)
    s = partition.symbols
    # entries of the codes of x_{T+1}, ..., x_{T+n} not already in the code of x_T
    extra = [np.where(s[:, T + n] >= 0, s[:, T + n] // partition.base.ubins, -1)]
    extra += [s[:, T + j] for j in range(n)]
    if partition.driving is not None:
        extra += [partition.driving[:, T + j] for j in range(1, n + 1)]
    eta = _row_ids(now)
    joint = _row_ids(now + extra)
    m = partition.symbols.shape[0]
    orbit = np.repeat(np.arange(m), len(T))
    h_joint = _entropy_mm(joint)
    h_eta = _entropy_mm(eta)
    value = (h_joint - h_eta) / n
    counts = np.bincount(joint)
    occ = float(np.median(counts[counts > 0]))
    k_joint = int((counts > 0).sum())
    k_eta = int((np.bincount(eta) > 0).sum())
    N = len(joint)
    corr = ((k_joint - 1) - (k_eta - 1)) / (2 * N) / n
    rng = np.random.default_rng(seed)
    boots = []
    if bootstrap == 0:
        se = float("nan")
    elif m >= 2:
        for _ in range(bootstrap):
            w = rng.multinomial(m, np.full(m, 1.0 / m)).astype(float)[orbit]
            boots.append((_entropy_mm(joint, w) - _entropy_mm(eta, w)) / n)
        se = float(np.std(boots, ddof=1))
    else:
        # single orbit: blocks along time
        blocks = 16
        cut = np.array_split(np.arange(N), blocks)
        vals = [(_entropy_mm(joint[c]) - _entropy_mm(eta[c])) / n for c in cut]
        se = float(np.std(vals, ddof=1) / np.sqrt(blocks))
    under = occ < min_median_occupancy
    if under and bootstrap:
        se = float(np.hypot(se, corr))
    return EntropyEstimate(value, se, n, H, N, k_joint, occ, under, corr)


def select_horizon(system: RandomSystem, base: LeafPartition, empirical: EmpiricalMeasure, H_max: int = 10,
                   n: int = 1, min_median_occupancy: float = 50.0, condition_on_driving=None):
    """Largest horizon <= H_max whose joint atoms keep the median occupancy at or above the threshold.

    Returns (H, [(horizon, h), ...]) for the scanned horizons.
    """
    scan, best = [], 0
    for H in range(0, H_max + 1):
        try:
            P = build_subordinate_partition(system, base, empirical, H, condition_on_driving)
        except (InconclusiveEstimate, ValueError):
            break
        est = conditional_entropy(P, n, bootstrap=0, min_median_occupancy=min_median_occupancy)
        if est.undersampled:
            break
        scan.append((H, est.value))
        best = H
    return best, scan


def entropy_with_drift(system: RandomSystem, base: LeafPartition, empirical: EmpiricalMeasure, H: int,
                       n: int = 1, bootstrap: int = 64, seed: int = 0, condition_on_driving=None,
                       min_median_occupancy: float = 50.0):
    """Estimate at horizon H whose error bar also carries |h_H - h_{H-1}|.

    Refining the horizon only lowers the partition entropy towards its
    limit, so the last step is a scale for the remaining truncation bias.
    """
    P = build_subordinate_partition(system, base, empirical, H, condition_on_driving)
    est = conditional_entropy(P, n, bootstrap, seed, min_median_occupancy)
    drift = 0.0
    if H > 0:
        prev = conditional_entropy(build_subordinate_partition(system, base, empirical, H - 1, condition_on_driving),
                                   n, 0, seed, min_median_occupancy)
        drift = abs(est.value - prev.value)
    est.statistical_stderr = est.stderr
    est.horizon_drift = drift
    est.stderr = float(np.hypot(est.stderr, drift))
    return est, P


# ------------------------------------------------------- Birkhoff averages

@dataclass
class BirkhoffEstimate:
    value: float
    stderr: float
    n: int
    skipped: int

    def to_json(self):
        return {"value": self.value, "stderr": self.stderr, "n": self.n, "skipped_steps": self.skipped}


def birkhoff_logJu(system: RandomSystem, omega, x, n: int, n_conv: int = 60, gap_tol: float = 1e-6,
                   n_burn: int = 500) -> BirkhoffEstimate:
    """(1/n) sum log J^u along one orbit, with a block standard error.

    Two frames from different random starts are carried along; steps where
    they disagree by more than ``gap_tol`` (splitting not yet converged)
    are skipped and counted.
    """
    from .rds_core import forward_many
    k_u = split_dims(system)[0]
    if k_u == 0:
        return BirkhoffEstimate(0.0, 0.0, n, 0)
    x = forward_many(system, [omega.shift(-n_burn)], np.asarray(x, float)[None], n_burn)[0]
    _, hist = forward_many(system, [omega], x[None], n + n_conv, record=True)
    syms = omega.window(0, n + n_conv)[None]
    X = np.swapaxes(hist, 0, 1)
    a = track_log_unstable_jacobians(system, syms, X, k_u, n_conv, seed=1)[0]
    b = track_log_unstable_jacobians(system, syms, X, k_u, n_conv, seed=2)[0]
    ok = np.abs(a - b) <= gap_tol * np.maximum(1.0, np.abs(a))
    vals = a[ok]
    se = float(_block_stderr(vals[:, None])[0]) if len(vals) > 64 else np.inf
    return BirkhoffEstimate(float(vals.mean()), se, int(len(vals)), int((~ok).sum()))


def birkhoff_over_samples(system: RandomSystem, empirical: EmpiricalMeasure, n_conv: int = 60) -> BirkhoffEstimate:
    """Average of log J^u over the empirical samples; standard error from per-orbit means."""
    k_u = split_dims(system)[0]
    vals = track_log_unstable_jacobians(system, empirical.symbols[:, :-1], empirical.samples, k_u, n_conv)
    per = vals.mean(axis=1)
    m = len(per)
    se = float(per.std(ddof=1) / np.sqrt(m)) if m > 1 else float(_block_stderr(vals[0][:, None])[0])
    return BirkhoffEstimate(float(vals.mean()), se, int(vals.size), 0)


# -------------------------------------------------------------- report

@dataclass
class EntropyReport:
    system: str
    h_conditional: EntropyEstimate
    birkhoff: BirkhoffEstimate
    sum_positive: float
    sum_positive_stderr: float
    partition: str
    budgets: dict
    flags: dict = field(default_factory=dict)
    comparison: dict | None = None
    control: dict | None = None
    failures: list = field(default_factory=list)
    assumptions: list = field(default_factory=list)

    def to_json(self):
        return {"system": self.system, "h_conditional": self.h_conditional.to_json() if self.h_conditional else None,
                "birkhoff_logJu": self.birkhoff.to_json() if self.birkhoff else None,
                "sum_positive_exponents": {"value": self.sum_positive, "stderr": self.sum_positive_stderr},
                "partition": self.partition, "budgets": self.budgets, "flags": self.flags,
                "srb_comparison": self.comparison, "non_srb_control": self.control,
                "failures": self.failures, "assumptions": self.assumptions}

    def csv_line(self) -> str:
        buf = io.StringIO()
        h = self.h_conditional
        csv.writer(buf).writerow([self.system, repr(h.value) if h else "", repr(self.sum_positive),
                                  repr(self.birkhoff.value) if self.birkhoff else "", repr(h.stderr) if h else "",
                                  repr(self.sum_positive_stderr), repr(self.birkhoff.stderr) if self.birkhoff else "",
                                  "pass" if self.flags.get("pesin") else "fail"])
        return buf.getvalue()


def within(a, sa, b, sb, k=3.0) -> bool:
    return bool(abs(a - b) <= k * np.hypot(sa, sb))


def supports_full_circle_stack(system: RandomSystem) -> bool:
    if system.driving.alphabet_size != 1 or system.fixed_point is None:
        return False
    try:
        f = field_at(system, system.base(), system.fixed_point, back=40, fwd=40, n_burn=0)
    except Exception:
        return False
    return f.k_u == 1 and circle_period(system, field_chart(f, 0)) is not None


def stack_for_entropy(system: RandomSystem, n_points: int = 40, spacing: float = 1e-3, k: int = 14, seed: int = 3):
    """Full-circle stack centred at the system's fixed point."""
    om = system.base()
    cf = field_at(system, om, system.fixed_point, back=80, fwd=80, n_burn=0)
    W = attractor_cloud(system, om, n_points, 80, 80, n_burn=300, seed=seed)
    return build_stack(system, W, cf, 0, spacing=spacing, k=k, full_circle=True)


DEFAULTS = {"n_orbits": 64, "n_samples": 10_000, "n_burn": 500, "horizon": "auto", "max_horizon": 10, "min_occupancy": 50.0, "n": 1, "ubins": 2,
            "grid_per_axis": 2, "n_spectrum": 100_000, "stack_points": 40, "stack_spacing": 1e-3,
            "stack_iterations": 14, "bootstrap": 64, "compare_srb": False, "comparison_bins": 32,
            "control": False}


def point_mass_control(system: RandomSystem, n_spectrum: int = 20_000, samples: int = 10_000) -> dict:
    """Point mass at the fixed point: entropy of a constant code against the exponents there."""
    x = np.asarray(system.fixed_point, dtype=float)
    X = np.broadcast_to(x, (2, samples, system.dim)).copy()
    E = EmpiricalMeasure(system.name + ":point-mass", X, np.zeros((2, samples), dtype=np.int64),
                         np.zeros(2, dtype=np.int64), 0)
    base = grid_partition(system, E, 4)
    P = build_subordinate_partition(system, base, E, 4, condition_on_driving=False)
    h = conditional_entropy(P, 1)
    sp = qr_spectrum(system, system.base(), x, n_spectrum)
    s, se = sp.sum_positive, sp.sum_positive_stderr()
    gap = s - h.value
    return {"h": h.value, "h_stderr": h.stderr, "sum_positive": s, "sum_positive_stderr": se,
            "ruelle_gap": gap, "strict_gap": bool(gap > 3 * np.hypot(h.stderr, se) and s > 0.5 and abs(h.value) < 1e-9)}


def entropy_formula_report(system: RandomSystem, config: dict | None = None, seed: int = 0) -> EntropyReport:
    """Conditional entropy, Birkhoff average of log J^u and the sum of positive exponents.

    Flags: 'ruelle' (h <= sum + 3 sigma), 'pesin' (all three pairwise
    within combined 3 sigma) and, when requested, the SRB density
    comparison and the point-mass control.
    """
    cfg = dict(DEFAULTS)
    cfg.update(config or {})
    failures, assumptions = [], [
        "the conditional entropy is reported for the constructed partition; that it attains the supremum "
        "over partitions is assumed, not checked"]
    E = empirical_srb(system, cfg["n_burn"], cfg["n_orbits"], cfg["n_samples"], seed)
    stack = None
    h = None
    try:
        if supports_full_circle_stack(system):
            stack = stack_for_entropy(system, cfg["stack_points"], cfg["stack_spacing"], cfg["stack_iterations"])
            base = leaf_partition(system, stack, E, cfg["ubins"])
            kind = f"stack leaves x {cfg['ubins']} u-bins"
        else:
            base = grid_partition(system, E, cfg["grid_per_axis"])
            kind = f"coordinate grid {cfg['grid_per_axis']} per axis"
            assumptions.append("finite-dimensional attractor: a coordinate grid partition replaces the "
                               "leaf partition")
        H = cfg["horizon"]
        if H == "auto":
            H, _ = select_horizon(system, base, E, cfg["max_horizon"], cfg["n"], cfg["min_occupancy"])
        h, P = entropy_with_drift(system, base, E, int(H), cfg["n"], cfg["bootstrap"], seed,
                                  min_median_occupancy=cfg["min_occupancy"])
        cfg["horizon"] = int(H)
    except Exception as e:          # partial report
        failures.append({"pipeline": "entropy.conditional_entropy", "error": repr(e)})
        kind = "none"
    try:
        B = birkhoff_over_samples(system, E)
    except Exception as e:
        B = None
        failures.append({"pipeline": "entropy.birkhoff_logJu", "error": repr(e)})
    try:
        sp = qr_spectrum(system, system.base(), system.initial_state, cfg["n_spectrum"], n_burn=cfg["n_burn"])
        S, Sse = float(sp.sum_positive), float(sp.sum_positive_stderr())
    except Exception as e:
        S = Sse = float("nan")
        failures.append({"pipeline": "oseledets.qr_spectrum", "error": repr(e)})
    flags = {}
    if h is not None and np.isfinite(S):
        flags["ruelle"] = bool(h.value <= S + 3 * np.hypot(h.stderr, Sse))
    if h is not None and B is not None and np.isfinite(S):
        flags["pesin"] = (within(h.value, h.stderr, S, Sse) and within(h.value, h.stderr, B.value, B.stderr)
                          and within(S, Sse, B.value, B.stderr))
    rep = EntropyReport(system.name, h, B, S, Sse, kind,
                        {k: cfg[k] for k in ("n_orbits", "n_samples", "n_burn", "horizon", "n", "n_spectrum")},
                        flags, failures=failures, assumptions=assumptions)
    if cfg["compare_srb"] and stack is not None:
        if flags.get("pesin"):
            try:
                dens = [stack_leaf_density(system, stack, i)[2] for i in range(len(stack.leaves))]
                cmp_ = conditional_comparison(system, stack, E.points(), dens, cfg["comparison_bins"])
                cmp_["ok"] = bool(cmp_.get("status") == "ok" and cmp_["l1"] <= 0.1)
                rep.comparison = cmp_
                flags["srb_densities_match"] = cmp_["ok"]
            except Exception as e:
                failures.append({"pipeline": "srb.conditional_comparison", "error": repr(e)})
        else:
            rep.comparison = {"status": "skipped", "reason": "entropy estimates disagree"}
    if cfg["control"]:
        try:
            rep.control = point_mass_control(system)
            flags["control_strict_gap"] = rep.control["strict_gap"]
        except Exception as e:
            failures.append({"pipeline": "entropy.point_mass_control", "error": repr(e)})
    return rep
