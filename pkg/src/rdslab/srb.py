"""Induced volumes on leaves, unstable Jacobians, distortion products and SRB densities.

Leaves are GraphMaps; the induced volume of a leaf is the pullback of the
norm-induced volume on its tangent spaces, integrated over the u-grid with
the trapezoid rule.  Conditional densities along unstable leaves are built
from distortion products over backward orbits computed inside leaf towers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .norm_geometry import Norm, _resolve_method, ball_volumes, det_batch, euclidean_ball_volume
from .rds_core import DynamicsError, RandomSystem, forward_many
from .unstable_manifolds import (Chart, GraphMap, LeafTower, StackChart, TransformUndefined, UnsupportedCase,
                                 field_chart, grid_size, interpolation_tolerance, leaf_tower, pull_back,
                                 transform_between)


class LeafImageMismatch(DynamicsError):
    pass


class DistortionError(DynamicsError):
    def __init__(self, msg, node=None, step=None):
        super().__init__(msg)
        self.node = node
        self.step = step


# ------------------------------------------------------------ volumes

def tangent_frames(g: GraphMap, a=None) -> np.ndarray:
    """Columns D phi(a) = Bu + Bcs Dg(a) of the leaf parameterization, shape (m, d, k_u)."""
    S = g.slopes if a is None else g.derivative(a)
    return g.chart.Bu[None] + g.chart.Bcs[None] @ S


def volume_factors(T, norm, method="auto", samples=20_000, seed=0):
    """det of T: (R^k, Lebesgue) -> (span T, induced volume of ``norm``), batched.

    Returns (values, relative standard errors).
    """
    norm = Norm.parse(norm)
    T = np.asarray(T, dtype=float)
    k = T.shape[-1]
    vol, se = ball_volumes(T, norm, method, samples, seed)
    return euclidean_ball_volume(k) / vol, se / vol


def trapezoid_weights(n: int, h: float, k: int) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    out = w
    for _ in range(k - 1):
        out = np.multiply.outer(out, w)
    return np.asarray(out).ravel()


@dataclass
class LeafMeasure:
    leaf: GraphMap
    weights: np.ndarray          # det(D phi) at the grid nodes
    rel_se: np.ndarray
    norm: Norm
    method: str

    def integrate(self, f=None, lo=None, hi=None) -> float:
        """Trapezoid integral of f (node values, default 1) against the induced volume.

        ``lo``/``hi`` select the sub-rectangle of nodes inside [lo, hi].
        """
        g = self.leaf
        vals = self.weights if f is None else self.weights * np.asarray(f)
        shape = (g.n,) * g.k_u
        ax = g.axis()
        if lo is None and hi is None:
            return float(trapezoid_weights(g.n, g.spacing, g.k_u) @ vals)
        lo = np.broadcast_to(-g.radius if lo is None else lo, (g.k_u,))
        hi = np.broadcast_to(g.radius if hi is None else hi, (g.k_u,))
        sl = []
        for i in range(g.k_u):
            i0 = int(np.searchsorted(ax, lo[i] - 1e-9 * g.spacing))
            i1 = int(np.searchsorted(ax, hi[i] + 1e-9 * g.spacing, side="right")) - 1
            if i1 <= i0:
                return 0.0
            sl.append(slice(i0, i1 + 1))
        sub = vals.reshape(shape)[tuple(sl)]
        m = sub.shape[0]
        return float(trapezoid_weights(m, g.spacing, g.k_u) @ sub.ravel())

    def total(self) -> float:
        return self.integrate()

    def cumulative(self, f=None) -> np.ndarray:
        """Running integral from the left end of a one-dimensional leaf, at the nodes."""
        if self.leaf.k_u != 1:
            raise UnsupportedCase("cumulative masses are defined for one-dimensional leaves")
        vals = self.weights if f is None else self.weights * np.asarray(f)
        h = self.leaf.spacing
        return np.concatenate([[0.0], np.cumsum((vals[1:] + vals[:-1]) * h / 2)])


def leaf_measure(leaf: GraphMap, norm="l2", method="auto", samples=20_000, seed=0) -> LeafMeasure:
    norm = Norm.parse(norm)
    w, se = volume_factors(tangent_frames(leaf), norm, method, samples, seed)
    if np.any(w <= 0):
        raise DynamicsError("degenerate leaf parameterization")
    return LeafMeasure(leaf, w, se, norm, method)


def leaf_volume(leaf: GraphMap, region=None, norm="l2", method="auto", samples=20_000, seed=0) -> float:
    """Induced volume of the part of the leaf over the u-box region = (lo, hi)."""
    m = leaf_measure(leaf, norm, method, samples, seed)
    if region is None:
        return m.total()
    lo, hi = region
    return m.integrate(lo=np.asarray(lo, float), hi=np.asarray(hi, float))


# ----------------------------------------------------------- Jacobians

def unstable_jacobians(system: RandomSystem, symbols, X, T, norm=None, method="auto", samples=20_000, seed=0):
    """det(Df(x_i) | span T_i) between ambient norms, batched; zero for degenerate images."""
    norm = system.ambient_norm if norm is None else Norm.parse(norm)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    J = system.jac_symbols(np.broadcast_to(np.asarray(symbols), (len(X),)), X)
    vals, _ = det_batch(J, np.asarray(T, dtype=float), norm, norm, method, samples, seed)
    return vals


def unstable_jacobian(system: RandomSystem, symbol: int, x, Eu, norm=None, method="auto") -> float:
    """J^u = det(Df_symbol(x) | E^u) in the ambient norm."""
    B = Eu.basis if hasattr(Eu, "basis") else np.asarray(Eu, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    return float(unstable_jacobians(system, symbol, np.asarray(x)[None], B[None], norm, method)[0])


def track_log_unstable_jacobians(system: RandomSystem, symbols, X, k_u: int, n_conv: int = 60,
                                 norm=None, method="auto", seed=0):
    """log J^u along stored orbits.

    ``X`` has shape (m, n+1, d) and ``symbols`` (m, n); a k_u-frame is pushed
    forward along each orbit and re-orthonormalised, and log det(Df|frame)
    is recorded after the first ``n_conv`` steps (when the frame has
    converged to E^u).  Returns an (m, n - n_conv) array.
    """
    X = np.asarray(X, dtype=float)
    symbols = np.asarray(symbols)
    m, n1, d = X.shape
    n = n1 - 1
    if n <= n_conv:
        raise ValueError("orbit shorter than the frame burn-in")
    rng = np.random.default_rng(seed)
    V = np.linalg.qr(rng.standard_normal((m, d, k_u)))[0]
    norm_ = system.ambient_norm if norm is None else Norm.parse(norm)
    out = np.empty((m, n - n_conv))
    for j in range(n):
        J = system.jac_symbols(symbols[:, j], X[:, j])
        if j >= n_conv:
            vals, _ = det_batch(J, V, norm_, norm_, method, seed=seed + j)
            out[:, j - n_conv] = np.log(vals)
        V = np.linalg.qr(J @ V)[0]
    return out


# ------------------------------------------------- change of variables

@dataclass
class PushforwardReport:
    max_rel_error: float
    membership_residual: float
    membership_tolerance: float
    masses: np.ndarray           # (blocks, 2): image-leaf mass and pulled-back Jacobian mass
    method: str
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def to_json(self):
        return {"max_rel_error": self.max_rel_error, "membership_residual": self.membership_residual,
                "membership_tolerance": self.membership_tolerance, "method": self.method,
                "tolerance": self.tolerance, "ok": self.ok, "blocks": int(len(self.masses))}


def _block_slices(n: int, blocks: int):
    edges = np.linspace(0, n - 1, blocks + 1).round().astype(int)
    return [slice(edges[i], edges[i + 1] + 1) for i in range(blocks) if edges[i + 1] > edges[i]]


def pushforward_density_check(system: RandomSystem, symbol: int, W: GraphMap, W2: GraphMap, norm=None,
                              method="auto", samples=None, seed=0, blocks: int | None = None,
                              membership_tol: float | None = None) -> PushforwardReport:
    """nu_{W2}(R) against the integral over f^{-1}(R) of det(Df|TW) d nu_W, per grid sub-rectangle R.

    The left side uses W2's own parameterization; the right side uses W's
    tangent planes at the preimages of W2's nodes, the derivative of f and
    the Jacobian of the u-coordinate change.  With Euclidean or polytope
    determinants the tolerance is 1e-6, with Monte Carlo volumes 1e-2.
    """
    norm = system.ambient_norm if norm is None else Norm.parse(norm)
    if samples is None:
        samples = 20_000 * 5 ** (W.k_u - 1)
    if blocks is None:
        blocks = 4 if W.k_u == 1 else 2
    T = transform_between(system, symbol, W, W2.chart, W2.radius, W2.n, index=W2.index)
    resid = float(np.max(np.linalg.norm((T.values - W2.values) @ W2.chart.Bcs.T, axis=-1)))
    tol_m = membership_tol if membership_tol is not None else max(10 * interpolation_tolerance(W2.values), 1e-10)
    if W2.k_u > 1 and membership_tol is None:
        tol_m = max(tol_m, 10 * _grid_tolerance_2d(W2))
    if resid > tol_m:
        raise LeafImageMismatch(f"image of the leaf misses the target leaf by {resid:.3e} > {tol_m:.3e}")
    A = T.info["preimages"]
    if np.abs(A).max() > W.radius * (1 + 1e-9):
        raise LeafImageMismatch("target leaf is not covered by the image of the source leaf")
    w2, se2 = volume_factors(tangent_frames(W2), norm, method, samples, seed)
    TA = tangent_frames(W, A)
    w1, se1 = volume_factors(TA, norm, method, samples, seed + 104729)
    X = W.chart.origin + W.displacements(A)
    J = unstable_jacobians(system, symbol, X, TA, norm, method, samples, seed + 224737)
    dens = J * w1 / np.abs(np.linalg.det(T.info["du_dA"]))
    shape = (W2.n,) * W2.k_u
    L = w2.reshape(shape)
    R = dens.reshape(shape)
    masses = []
    for sl in _block_slices(W2.n, blocks):
        if W2.k_u == 1:
            m = sl.stop - sl.start
            tw = trapezoid_weights(m, W2.spacing, 1)
            masses.append((tw @ L[sl], tw @ R[sl]))
        else:
            for sl2 in _block_slices(W2.n, blocks):
                m1, m2 = sl.stop - sl.start, sl2.stop - sl2.start
                tw = np.multiply.outer(trapezoid_weights(m1, W2.spacing, 1), trapezoid_weights(m2, W2.spacing, 1))
                masses.append(((tw * L[sl, sl2]).sum(), (tw * R[sl, sl2]).sum()))
    masses = np.asarray(masses)
    rel = float(np.max(np.abs(masses[:, 0] - masses[:, 1]) / masses[:, 0]))
    used = _resolve_method(norm, W.k_u, method)
    return PushforwardReport(rel, resid, tol_m, masses, used, 1e-2 if used == "monte_carlo" else 1e-6)


def _grid_tolerance_2d(g: GraphMap) -> float:
    V = g.values.reshape((g.n, g.n, -1))
    return max(np.abs(np.diff(V, 2, axis=0)).max(initial=0.0), np.abs(np.diff(V, 2, axis=1)).max(initial=0.0)) / 8


# ------------------------------------------------------------ distortion

@dataclass
class DistortionKernel:
    tower: LeafTower
    reference: np.ndarray         # u-coordinate of x' on the tower's top graph
    points: np.ndarray            # u-coordinates of the evaluation points
    log_delta: np.ndarray         # log Delta_N(x', y) at the points, N = steps
    increments: np.ndarray        # sup over points of |log Delta_N - log Delta_(N-1)|, N = 1..steps
    tail_rate: float
    tail_bound: float
    converged: bool
    degenerate: bool
    lipschitz: float
    log_partial: np.ndarray = field(repr=False, default=None)   # (steps, points)

    @property
    def steps(self) -> int:
        return len(self.increments)

    @property
    def limit(self) -> np.ndarray:
        return np.exp(self.log_delta)

    @property
    def partial_products(self) -> np.ndarray:
        return np.exp(self.log_partial)

    def to_json(self):
        return {"steps": self.steps, "tail_rate": self.tail_rate, "tail_bound": self.tail_bound,
                "converged": self.converged, "degenerate_increments": self.degenerate,
                "lipschitz_log_delta": self.lipschitz,
                "last_increment": float(self.increments[-1]) if self.steps else 0.0}


def fit_geometric_tail(s) -> float:
    """Ratio of a geometric fit to the nonzero tail of a decreasing sequence; 0 when it vanishes."""
    s = np.asarray(s, dtype=float)
    idx = np.nonzero(s > 1e-14)[0]
    if len(idx) < 3:
        return 0.0
    idx = idx[len(idx) // 2:] if len(idx) >= 6 else idx
    slope = np.polyfit(idx, np.log(s[idx]), 1)[0]
    return float(np.exp(slope))


def _log_jacobian_on_graph(system, symbol, g: GraphMap, A, norm, method):
    T = tangent_frames(g, A)
    X = g.chart.origin + g.displacements(A)
    return np.log(unstable_jacobians(system, symbol, X, T, norm, method))


def distortion_product(system: RandomSystem, tower: LeafTower, reference, points=None, N_max: int = 60,
                       tol: float = 1e-10, steps: int | None = None, norm=None, method="auto") -> DistortionKernel:
    """Delta_N(x', y) = prod_{k=1..N} J^u(f^-k x') / J^u(f^-k y) along the leaf tower.

    Stops when the sup increment drops below ``tol`` or at N_max (or after
    exactly ``steps`` steps when given).  Backward orbits are taken inside
    the tower's graphs.
    """
    norm = system.ambient_norm if norm is None else Norm.parse(norm)
    g0 = tower.graphs[0]
    pts = g0.nodes() if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    P = np.vstack([ref, pts])
    limit = min(N_max if steps is None else steps, tower.depth)
    logd = np.zeros(len(pts))
    partial, incs = [], []
    cur = P
    converged = False
    for k in range(1, limit + 1):
        j = tower.t - k
        sym = tower.field.window.symbol(j)
        try:
            cur = pull_back(system, sym, tower.graphs[k], tower.graphs[k - 1].chart, cur)
        except TransformUndefined as e:
            node = None if e.nodes is None or not len(e.nodes) else np.asarray(e.nodes)[0].tolist()
            raise DistortionError(f"preimage failure at step {k}: {e}", node, k) from e
        lj = _log_jacobian_on_graph(system, sym, tower.graphs[k], cur, norm, method)
        inc = lj[0] - lj[1:]
        logd = logd + inc
        partial.append(logd.copy())
        incs.append(float(np.abs(inc).max()))
        if steps is None and incs[-1] < tol:
            converged = True
            break
    incs = np.asarray(incs)
    rho = fit_geometric_tail(incs)
    degenerate = bool(incs.size == 0 or incs.max() <= 1e-14)
    if degenerate:
        converged = True
    last = incs[-1] if incs.size else 0.0
    tail = float(last * rho / (1 - rho)) if rho < 1 else np.inf
    lip = _log_lipschitz(g0, pts, logd)
    return DistortionKernel(tower, ref[0], pts, logd, incs, rho, tail, converged, degenerate, lip,
                            np.asarray(partial).reshape(len(incs), len(pts)))


def _log_lipschitz(g: GraphMap, pts, logd) -> float:
    Y = g.displacements(pts)
    if len(pts) < 2:
        return 0.0
    if g.k_u == 1:
        o = np.argsort(pts[:, 0])
        dy = np.linalg.norm(np.diff(Y[o], axis=0), axis=1)
        dl = np.abs(np.diff(logd[o]))
        keep = dy > 0
        return float(np.max(dl[keep] / dy[keep], initial=0.0))
    # pairwise over a subsample keeps this cheap on 2-d grids
    idx = np.unique(np.linspace(0, len(pts) - 1, min(len(pts), 400)).astype(int))
    D = np.linalg.norm(Y[idx, None] - Y[None, idx], axis=-1)
    L = np.abs(logd[idx, None] - logd[None, idx])
    keep = D > 0
    return float(np.max(L[keep] / D[keep], initial=0.0))


def reference_change_residual(system, tower: LeafTower, ref1, ref2, points=None, N: int | None = None,
                              norm=None, method="auto") -> float:
    """sup_y |Delta(x'', y) - Delta(x', y) Delta(x'', x')| / Delta(x'', y), both sides computed separately."""
    pts = tower.graphs[0].nodes() if points is None else np.atleast_2d(points)
    K2 = distortion_product(system, tower, ref2, pts, steps=N, norm=norm, method=method)
    n = K2.steps
    K1 = distortion_product(system, tower, ref1, np.vstack([pts, np.atleast_2d(ref2)]), steps=n,
                            norm=norm, method=method)
    lhs = K2.log_delta
    rhs = K1.log_delta[:-1] - K1.log_delta[-1]
    return float(np.max(np.abs(np.expm1(rhs - lhs))))


# ------------------------------------------------------------- densities

@dataclass
class LeafDensity:
    leaf: GraphMap
    values: np.ndarray
    normalizer: float
    integral: float
    measure: LeafMeasure = field(repr=False, default=None)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"u{i}" for i in range(self.leaf.k_u)] + ["q"])
            for a, q in zip(self.leaf.nodes(), self.values):
                w.writerow([repr(float(x)) for x in a] + [repr(float(q))])


def srb_density(kernel: DistortionKernel, measure: LeafMeasure) -> LeafDensity:
    """q = Delta / int Delta d nu on the measure's leaf (kernel points must be its nodes)."""
    if len(kernel.log_delta) != len(measure.weights):
        raise ValueError("kernel must be evaluated at the nodes of the measured leaf")
    if not kernel.converged:
        raise DistortionError("distortion kernel has not converged", step=kernel.steps)
    D = np.exp(kernel.log_delta - kernel.log_delta.max())
    Z = measure.integrate(D)
    q = D / Z
    return LeafDensity(measure.leaf, q, float(Z * np.exp(kernel.log_delta.max())), measure.integrate(q), measure)


def leaf_density(system: RandomSystem, field_, t: int, radius: float, spacing: float, N_max: int = 60,
                 tol: float = 1e-10, norm=None, method="auto", reference=None, k0: int = 30):
    """Leaf through x_t with its tower, distortion kernel and SRB density.

    Returns (tower, kernel, measure, density).
    """
    tower = leaf_tower(system, field_, t, N_max, radius, spacing, k0)
    g = tower.graphs[0]
    ref = np.zeros(g.k_u) if reference is None else reference
    K = distortion_product(system, tower, ref, None, N_max, tol, norm=norm, method=method)
    m = leaf_measure(g, system.ambient_norm if norm is None else norm, method)
    return tower, K, m, srb_density(K, m)


def stack_leaf_density(system: RandomSystem, stack: StackChart, leaf: int, N_max: int = 60, tol: float = 1e-10,
                       k0: int = 20, norm=None, method="auto"):
    """SRB density of a stack leaf at its central-chart nodes.

    The leaf's own orbit window gives a tower; the central nodes are moved
    into the leaf chart through the lift anchored at the leaf's base point.
    Returns (kernel, measure, density) with the measure on the central graph.
    """
    g = stack.leaves[leaf]
    f = g.info.get("field")
    if f is None:
        raise UnsupportedCase("stack leaf carries no orbit window")
    tower = leaf_tower(system, f, stack.index, N_max, g.info["leaf_radius"], g.spacing, k0)
    chart = tower.graphs[0].chart
    anchor = np.asarray(g.info["anchor"])
    z = g.displacements() - anchor
    a_leaf = chart.coords(z)[0]
    mid = len(a_leaf) // 2
    K = distortion_product(system, tower, a_leaf[mid], a_leaf, N_max, tol, norm=norm, method=method)
    m = leaf_measure(g, system.ambient_norm if norm is None else norm, method)
    return K, m, srb_density(K, m)


def density_functional_equation_check(system: RandomSystem, symbol: int, q: LeafDensity, q2: LeafDensity,
                                      norm=None, method="auto", perturb: float = 0.0) -> dict:
    """q2(f y) J^u(y) / q(y) over the nodes of q's leaf whose images lie on q2's leaf.

    The ratio is constant for genuine conditional densities; ``perturb``
    multiplies q by 1 + perturb * sin(pi u / r) as a control.
    """
    W, W2 = q.leaf, q2.leaf
    A = W.nodes()
    X = W.chart.origin + W.displacements(A)
    Y = system.step_symbols(np.full(len(X), symbol), X)
    J0 = system.jac(symbol, W.chart.origin)
    off = system.difference(system.step(symbol, W.chart.origin), W2.chart.origin)
    dy = system.difference_near(Y, W2.chart.origin, off + W.displacements(A) @ J0.T)
    a2, _ = W2.chart.coords(dy)
    inside = np.abs(a2).max(axis=1) <= W2.radius
    Ju = unstable_jacobians(system, symbol, X, tangent_frames(W), norm, method)
    qv = q.values * (1 + perturb * np.sin(np.pi * A[:, 0] / W.radius))
    q2v = W2._interp(q2.values[:, None], a2)[:, 0]
    r = (q2v * Ju / qv)[inside]
    cv = float(np.std(r) / np.mean(r))
    return {"coefficient_of_variation": cv, "mean_ratio": float(np.mean(r)), "nodes": int(inside.sum()),
            "perturbation": perturb, "ok": bool(cv <= 1e-3)}


# ------------------------------------------------------- empirical SRB

@dataclass
class EmpiricalMeasure:
    system_name: str
    samples: np.ndarray           # (orbits, per_orbit, d)
    symbols: np.ndarray           # (orbits, per_orbit): symbol driving each sample one step
    seeds: np.ndarray
    n_burn: int
    info: dict = field(default_factory=dict)

    @property
    def n_orbits(self):
        return self.samples.shape[0]

    def points(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def coarse_bins(self, system: RandomSystem, X, per_axis: int = 4, axes=None, edges=None):
        axes = list(range(min(2, system.dim))) if axes is None else list(axes)
        if edges is None:
            edges = []
            P = self.points()
            for ax in axes:
                if ax in system.periodic:
                    edges.append(np.linspace(0, 1, per_axis + 1)[1:-1])
                else:
                    edges.append(np.quantile(P[:, ax], np.linspace(0, 1, per_axis + 1)[1:-1]))
        code = np.zeros(X.shape[:-1], dtype=np.int64)
        for ax, e in zip(axes, edges):
            code = code * per_axis + np.searchsorted(e, X[..., ax], side="right")
        return code, edges

    def masses(self, system, X, per_axis=4, axes=None, edges=None):
        """Per-orbit coarse-bin masses, shape (orbits, bins)."""
        code, edges = self.coarse_bins(system, X, per_axis, axes, edges)
        nb = per_axis ** len(edges)
        out = np.stack([np.bincount(c.ravel(), minlength=nb) / c.size for c in code])
        return out, edges

    def invariance_probe(self, system: RandomSystem, per_axis: int = 4) -> dict:
        """Push every sample one step; coarse-bin masses must move by at most 3 standard errors."""
        m0, edges = self.masses(system, self.samples, per_axis)
        pushed = system.step_symbols(self.symbols.ravel(), self.points()).reshape(self.samples.shape)
        m1, _ = self.masses(system, pushed, per_axis, edges=edges)
        p0, p1 = m0.mean(axis=0), m1.mean(axis=0)
        se = standard_errors(m0)
        z = np.abs(p1 - p0) / np.maximum(se, 1e-300)
        z = np.where(np.abs(p1 - p0) == 0, 0.0, z)
        return {"max_z": float(z.max()), "ok": bool(np.all(z <= 3)), "bins": int(len(p0))}

    def to_csv(self, path):
        d = self.samples.shape[-1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "step"] + [f"x{i}" for i in range(d)])
            for o in range(self.n_orbits):
                for j, x in enumerate(self.samples[o]):
                    w.writerow([int(self.seeds[o]), self.n_burn + j] + [repr(float(v)) for v in x])


def standard_errors(per_orbit: np.ndarray) -> np.ndarray:
    """Standard error of the pooled mass from the spread across orbits (binomial for one orbit)."""
    m = len(per_orbit)
    p = per_orbit.mean(axis=0)
    if m >= 2:
        return per_orbit.std(axis=0, ddof=1) / np.sqrt(m)
    return np.sqrt(p * (1 - p) / per_orbit.size)


def orbit_seeds(seed: int, n: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed).spawn(n)
    return np.array([int(s.generate_state(1, np.uint32)[0]) for s in ss], dtype=np.int64)


def empirical_srb(system: RandomSystem, n_burn: int, n_orbits: int, n_samples_per_orbit: int, seed: int = 0,
                  spread: float = 1.0) -> EmpiricalMeasure:
    """Birkhoff samples: each orbit has its own driving seed and starts at the configured
    initial state plus a uniform offset in [-spread/2, spread/2]^d drawn from that seed."""
    seeds = orbit_seeds(seed, n_orbits)
    d = system.dim
    X0 = np.empty((n_orbits, d))
    omegas = []
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        X0[i] = np.asarray(system.initial_state, float) + spread * rng.uniform(-0.5, 0.5, d)
        omegas.append(system.driving.with_seed(int(s)).point(0))
    X = forward_many(system, omegas, X0, n_burn)
    starts = [w.shift(n_burn) for w in omegas]
    _, hist = forward_many(system, starts, X, n_samples_per_orbit - 1, record=True)
    samples = np.ascontiguousarray(np.swapaxes(hist, 0, 1))
    syms = np.stack([w.window(0, n_samples_per_orbit) for w in starts])
    return EmpiricalMeasure(system.name, samples, syms, seeds, n_burn, {"spread": spread, "seed": seed})


# ------------------------------------------------- density comparison

def _bin_masses(cum: np.ndarray, nodes: np.ndarray, edges: np.ndarray) -> np.ndarray:
    F = np.interp(edges, nodes, cum)
    return np.diff(F)


def conditional_comparison(system: RandomSystem, stack: StackChart, X, densities: list, bins: int = 32,
                           bundles: int = 1, min_samples: int = 1000, tol: float | None = None) -> dict:
    """Along-leaf histograms of samples against the integrals of q over the same u-bins.

    ``densities`` holds one LeafDensity per stack leaf.  Leaves are grouped
    into ``bundles`` by their E^cs offset; each bundle's expected histogram
    mixes its leaves' densities with the observed leaf frequencies.  The
    same comparison against the normalised induced volume is reported as a
    control.
    """
    if len(densities) != len(stack.leaves):
        raise ValueError("one density per leaf required")
    idx, dist, a = stack.assign(system, X, tol)
    ok = idx >= 0
    n_in = int(ok.sum())
    report = {"samples": int(len(idx)), "assigned": n_in, "unassigned_fraction": float(1 - n_in / max(len(idx), 1)),
              "bins": bins, "leaves": len(stack.leaves)}
    if n_in < min_samples:
        report.update(status="inconclusive", reason=f"{n_in} in-stack samples < {min_samples}")
        return report
    R = stack.radius
    edges = np.linspace(-R, R, bins + 1)
    nodes = stack.leaves[0].axis()
    order = np.argsort(stack.sigma[:, 0]) if len(stack.sigma) else np.zeros(0, int)
    groups = [g for g in np.array_split(order, max(1, min(bundles, len(order)))) if len(g)]
    counts = np.bincount(idx[ok], minlength=len(stack.leaves))
    per = []
    tot_l1 = tot_u = tot_floor = 0.0
    for gidx in groups:
        sel = ok & np.isin(idx, gidx)
        nb = int(sel.sum())
        if nb == 0:
            continue
        hist = np.histogram(np.clip(a[sel], -R, R), edges)[0] / nb
        p = np.zeros(bins)
        pu = np.zeros(bins)
        for l in gidx:
            wl = counts[l] / nb
            if wl == 0:
                continue
            meas = densities[l].measure
            p += wl * _bin_masses(meas.cumulative(densities[l].values), nodes, edges)
            cu = meas.cumulative()
            pu += wl * _bin_masses(cu / cu[-1], nodes, edges)
        l1 = float(np.abs(hist - p).sum())
        l1u = float(np.abs(hist - pu).sum())
        floor = float(np.sum(np.sqrt(2 * p * (1 - p) / (np.pi * nb))))
        per.append({"leaves": [int(i) for i in gidx], "samples": nb, "l1": l1, "l1_uniform": l1u,
                    "noise_floor": floor})
        tot_l1 += l1 * nb
        tot_u += l1u * nb
        tot_floor += floor * nb
    l1 = tot_l1 / n_in
    l1u = tot_u / n_in
    report.update(status="ok", l1=l1, l1_uniform=l1u, mismatch_ratio=l1u / max(l1, 1e-300),
                  noise_floor=tot_floor / n_in, bundles=per)
    return report


def image_leaf_pair(system: RandomSystem, field_, t: int, radius: float, spacing: float, k: int = 40,
                    margin: float = 0.9):
    """Leaf W at t and leaf W2 at t+1 from two separate graph-transform chains.

    W2's radius is ``margin`` times radius times the weakest linear
    expansion of E^u at t, so that f(W) covers it.
    """
    from .unstable_manifolds import iterate_to_unstable
    W = iterate_to_unstable(system, field_, t, k, radius, spacing, certify=False).graph
    m = float(np.linalg.svd(field_.Ru[field_._i(t)], compute_uv=False).min())
    W2 = iterate_to_unstable(system, field_, t + 1, k + 3, margin * radius * m, spacing, certify=False).graph
    return W, W2
