"""Local unstable manifolds by graph transforms, and unstable stacks.

A chart at an orbit point x has an origin, a basis Bu of E^u and a basis
Bcs of E^cs; a point is x + Bu a + Bcs b.  A graph is b = g(a) sampled on
a uniform tensor grid over a box |a|_inf <= r (dim E^u <= 2) with
multilinear interpolation.  Slopes Dg are stored at the nodes and carried
through each transform by the chain rule; they feed the Newton solves,
the tangent checks and the cone checks.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .norm_geometry import euclidean_subspace_distance
from .oseledets import (AdaptedNorm, SplittingField, adapted_norm, connecting_map, delta1,
                        splitting_field)
from .rds_core import DynamicsError, OrbitWindow, RandomSystem, forward_many


class TransformUndefined(DynamicsError):
    def __init__(self, msg, nodes=None, residual=None):
        super().__init__(msg)
        self.nodes = nodes
        self.residual = residual


class ConeConditionError(DynamicsError):
    def __init__(self, msg, lipschitz):
        super().__init__(msg)
        self.lipschitz = lipschitz


class UnsupportedCase(DynamicsError):
    pass


NEWTON_CAP = 50
NEWTON_TOL = 1e-12


# ----------------------------------------------------------------- charts

@dataclass(frozen=True)
class Chart:
    origin: np.ndarray
    Bu: np.ndarray
    Bcs: np.ndarray

    @property
    def k_u(self):
        return self.Bu.shape[1]

    @property
    def k_cs(self):
        return self.Bcs.shape[1]

    @property
    def inverse(self):
        return np.linalg.inv(np.hstack([self.Bu, self.Bcs]))

    def coords(self, z):
        """(a, b) coordinates of displacement vectors z."""
        c = np.asarray(z, dtype=float) @ self.inverse.T
        return c[..., :self.k_u], c[..., self.k_u:]

    def displacement(self, a, b):
        return np.asarray(a) @ self.Bu.T + np.asarray(b) @ self.Bcs.T


def field_chart(field_: SplittingField, t: int) -> Chart:
    i = field_._i(t)
    return Chart(field_.point(t).copy(), field_.U[i].copy(), field_.centerstable(t).basis.copy())


# ----------------------------------------------------------------- graphs

@dataclass
class GraphMap:
    chart: Chart
    radius: float
    n: int
    values: np.ndarray          # (n^k_u, k_cs)
    slopes: np.ndarray          # (n^k_u, k_cs, k_u)
    index: int = 0
    domain_tag: str = "chart-coordinates"
    info: dict = field(default_factory=dict)

    @property
    def k_u(self):
        return self.chart.k_u

    @property
    def spacing(self):
        return 2 * self.radius / (self.n - 1)

    def axis(self):
        return np.linspace(-self.radius, self.radius, self.n)

    def nodes(self):
        ax = self.axis()
        if self.k_u == 1:
            return ax[:, None]
        g = np.meshgrid(*([ax] * self.k_u), indexing="ij")
        return np.stack([x.ravel() for x in g], axis=-1)

    def _cells(self, a):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        f = (a + self.radius) / self.spacing
        i0 = np.clip(np.floor(f).astype(int), 0, self.n - 2)
        return i0, f - i0

    def _interp(self, table, a):
        i0, w = self._cells(a)
        tab = table.reshape((self.n,) * self.k_u + table.shape[1:])
        extra = (None,) * (table.ndim - 1)
        if self.k_u == 1:
            wi = w[:, 0][(...,) + extra]
            return (1 - wi) * tab[i0[:, 0]] + wi * tab[i0[:, 0] + 1]
        if self.k_u == 2:
            wx = w[:, 0][(...,) + extra]
            wy = w[:, 1][(...,) + extra]
            i, j = i0[:, 0], i0[:, 1]
            return ((1 - wx) * (1 - wy) * tab[i, j] + wx * (1 - wy) * tab[i + 1, j]
                    + (1 - wx) * wy * tab[i, j + 1] + wx * wy * tab[i + 1, j + 1])
        raise UnsupportedCase("graphs over E^u of dimension >= 3 are not supported")

    def __call__(self, a):
        return self._interp(self.values, a)

    def derivative(self, a):
        return self._interp(self.slopes, a)

    def displacements(self, a=None):
        a = self.nodes() if a is None else np.atleast_2d(a)
        return self.chart.displacement(a, self(a))

    def points(self, system: RandomSystem, a=None):
        return system.wrap(self.chart.origin + self.displacements(a))

    def secant_lipschitz(self, norm_u=None, norm_cs=None, radius=None) -> float:
        """Lipschitz constant of the interpolant from grid-edge secants.

        With norms given, lengths are |Bu da| and |Bcs db| in those norms
        (for example the u and cs blocks of an adapted norm).
        """
        V = self.values.reshape((self.n,) * self.k_u + (-1,))
        nodes = self.nodes().reshape((self.n,) * self.k_u + (self.k_u,))
        best = 0.0
        for ax in range(self.k_u):
            dV = np.diff(V, axis=ax).reshape(-1, V.shape[-1])
            dA = np.diff(nodes, axis=ax).reshape(-1, self.k_u)
            mid = (nodes.take(range(self.n - 1), axis=ax).reshape(-1, self.k_u) + dA / 2)
            if radius is not None:
                keep = np.abs(mid).max(axis=1) <= radius + 1e-12
                dV, dA = dV[keep], dA[keep]
            if not len(dV):
                continue
            num = _block_length(self.chart.Bcs, dV, norm_cs)
            den = _block_length(self.chart.Bu, dA, norm_u)
            best = max(best, float(np.max(num / den)))
        return best

    def slope_lipschitz(self, norm_u=None, norm_cs=None, radius=None, directions=64) -> float:
        """sup of the stored slopes as operators between the chosen norms."""
        S = self.slopes
        if radius is not None:
            keep = np.abs(self.nodes()).max(axis=1) <= radius + 1e-12
            S = S[keep]
        if self.k_u == 1:
            dirs = np.ones((1, 1))
        else:
            ang = np.linspace(0, np.pi, directions, endpoint=False)
            dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        den = _block_length(self.chart.Bu, dirs, norm_u)
        num = np.stack([_block_length(self.chart.Bcs, S @ d, norm_cs) for d in dirs], axis=1)
        return float(np.max(num / den[None, :]))

    def sup_distance(self, other: "GraphMap", norm=None) -> float:
        diff = self.values - other.values
        return float(np.max(_block_length(self.chart.Bcs, diff, norm)))

    def triple_norm(self, norm_u, norm_cs, exclude_origin=True) -> float:
        """sup_{a != 0} |g(a)|' / |a|' over the grid nodes."""
        a = self.nodes()
        keep = np.abs(a).max(axis=1) > 1e-15 if exclude_origin else slice(None)
        return float(np.max(_block_length(self.chart.Bcs, self.values[keep], norm_cs)
                            / _block_length(self.chart.Bu, a[keep], norm_u)))

    def to_csv(self, path):
        """Rows: grid coordinates of E^u then E^cs values."""
        a = self.nodes()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"u{i}" for i in range(self.k_u)] + [f"g{j}" for j in range(self.values.shape[1])])
            for ai, vi in zip(a, self.values):
                w.writerow([repr(float(x)) for x in ai] + [repr(float(x)) for x in vi])


def _block_length(B, coef, norm):
    vec = np.asarray(coef) @ B.T
    if norm is None:
        return np.linalg.norm(vec, axis=-1)
    return np.atleast_1d(norm(vec))


def zero_graph(chart: Chart, radius: float, n: int, index: int = 0) -> GraphMap:
    if n % 2 == 0:
        n += 1
    m = n ** chart.k_u
    return GraphMap(chart, float(radius), n, np.zeros((m, chart.k_cs)), np.zeros((m, chart.k_cs, chart.k_u)),
                    index)


def grid_size(radius: float, spacing: float) -> int:
    n = int(round(2 * radius / spacing)) + 1
    return n if n % 2 == 1 else n + 1


# ------------------------------------------------------ the transform

def _solve_preimages(system: RandomSystem, symbol: int, g: GraphMap, target: Chart, A_t: np.ndarray):
    """Per-node damped Newton for pi^u_target f(phi_g(A)) = A_t.

    Returns (A, target coordinates of the images, their derivative in A,
    residuals, iterations).
    """
    src = g.chart
    ku = src.k_u
    Tinv = target.inverse
    M = len(A_t)
    J0 = system.jac(symbol, src.origin)
    offset = system.difference(system.step(symbol, src.origin), target.origin)
    dphi0 = src.Bu + src.Bcs @ g.derivative(np.zeros((1, ku)))[0]
    K = (Tinv @ J0 @ dphi0)[:ku]
    A = np.linalg.solve(K, (A_t - (Tinv @ offset)[:ku]).T).T
    syms = np.full(M, symbol)

    def evaluate(A, need_D=True):
        z = src.displacement(A, g(A))
        x = src.origin + z
        y = system.step_symbols(syms, x)
        dy = system.difference_near(y, target.origin, offset + z @ J0.T)
        c = dy @ Tinv.T
        if not need_D:
            return c, None
        Jx = system.jac_symbols(syms, x)
        D = (Tinv @ Jx) @ (src.Bu + src.Bcs @ g.derivative(A))
        return c, D

    scale = max(1.0, float(np.abs(A_t).max(initial=0.0)))
    res_norm = np.full(M, np.inf)
    for it in range(NEWTON_CAP):
        c, D = evaluate(A)
        res = c[:, :ku] - A_t
        res_norm = np.abs(res).max(axis=1)
        active = res_norm > NEWTON_TOL * scale
        if not active.any():
            break
        step = np.linalg.solve(D[:, :ku, :], res[..., None])[..., 0]
        t = np.ones(M)
        for _ in range(20):
            ct, _ = evaluate(A - t[:, None] * step, need_D=False)
            rn = np.abs(ct[:, :ku] - A_t).max(axis=1)
            worse = active & (rn > res_norm) & (t > 1e-3)
            if not worse.any():
                break
            t = np.where(worse, t / 2, t)
        A = np.where(active[:, None], A - t[:, None] * step, A)
    c, D = evaluate(A)
    res_norm = np.abs(c[:, :ku] - A_t).max(axis=1)
    bad = res_norm > NEWTON_TOL * scale * 10
    if bad.any():
        raise TransformUndefined(f"Newton failed at {int(bad.sum())} nodes, worst residual {res_norm.max():.3e} "
                                 f"at u={A_t[np.argmax(res_norm)].tolist()}", A_t[bad], float(res_norm.max()))
    return A, c, D, res_norm, it + 1


def transform_between(system: RandomSystem, symbol: int, g: GraphMap, target: Chart, radius: float,
                      n: int, index=None) -> GraphMap:
    """Image of graph(g) under f_symbol, re-graphed over ``target`` by per-node Newton solves."""
    ku = g.k_u
    shell = zero_graph(target, radius, n, g.index + 1 if index is None else index)
    A, c, D, res_norm, its = _solve_preimages(system, symbol, g, target, shell.nodes())
    values = c[:, ku:]
    slopes = D[:, ku:, :] @ np.linalg.inv(D[:, :ku, :])
    out = replace(shell, values=values, slopes=slopes)
    out.info = {"newton_iterations": its, "max_residual": float(res_norm.max()), "preimages": A,
                "du_dA": D[:, :ku, :]}
    return out


def pull_back(system: RandomSystem, symbol: int, g_prev: GraphMap, target: Chart, a):
    """u-coordinates on graph(g_prev) of the preimages of target-chart points with u-coordinates ``a``.

    The preimages are taken within the previous graph, so errors transverse
    to the leaf are never amplified by the backward dynamics.
    """
    A, c, D, res, _ = _solve_preimages(system, symbol, g_prev, target, np.atleast_2d(np.asarray(a, float)))
    if np.abs(A).max(initial=0.0) > g_prev.radius * (1 + 1e-9):
        raise TransformUndefined("preimage leaves the domain of the previous graph",
                                 A[np.abs(A).max(axis=1) > g_prev.radius], float(np.abs(A).max()))
    return A


@dataclass
class LeafTower:
    """Graphs of the unstable leaves through x_{t-j}, j = 0..depth, along one orbit window."""
    field: SplittingField
    t: int
    graphs: list                # graphs[j] lives at index t - j

    @property
    def depth(self):
        return len(self.graphs) - 1

    def backward_orbit(self, system: RandomSystem, a, steps: int | None = None):
        """u-coordinates of the preimages of leaf points a (on graphs[0]) for j = 0..steps."""
        steps = self.depth if steps is None else steps
        out = [np.atleast_2d(np.asarray(a, dtype=float))]
        for j in range(1, steps + 1):
            g_prev, g_next = self.graphs[j], self.graphs[j - 1]
            out.append(pull_back(system, self.field.window.symbol(self.t - j), g_prev, g_next.chart, out[-1]))
        return out


def leaf_tower(system: RandomSystem, field_: SplittingField, t: int, depth: int, radius: float,
               spacing: float, k0: int = 30, safety: float = 1.15) -> LeafTower:
    """Converged leaves at t, t-1, ..., t-depth with radii shrinking along the orbit.

    The radius at t-j bounds the preimage of the top box under the linear
    restricted maps (sup-norm of the inverse product), times ``safety`` for
    the nonlinear terms, plus two grid spacings.  A pull-back that still
    leaves its graph raises TransformUndefined.
    """
    radii = [float(radius)]
    P = np.eye(field_.k_u)
    for j in range(depth + k0):
        if j < depth:
            P = np.linalg.solve(field_.Ru[field_._i(t - j - 1)], P)
            r = safety * np.abs(P).sum(axis=1).max() * radius + 2 * spacing
            radii.append(max(r, 5 * spacing))
        else:
            radii.append(radii[-1])
    lo = t - depth - k0
    g = zero_graph(field_chart(field_, lo), radii[-1], grid_size(radii[-1], spacing), lo)
    graphs = {}
    for j in range(lo, t):
        r = radii[t - j - 1]
        g = transform_between(system, field_.window.symbol(j), g, field_chart(field_, j + 1), r,
                              grid_size(r, spacing), index=j + 1)
        if t - (j + 1) <= depth:
            graphs[t - (j + 1)] = g
    return LeafTower(field_, t, [graphs[j] for j in range(depth + 1)])


def graph_transform(system: RandomSystem, field_: SplittingField, t: int, g: GraphMap,
                    radius: float | None = None, n: int | None = None,
                    cone: AdaptedNorm | None = None, cone_radius: float | None = None,
                    cone_bound: float = 0.1) -> GraphMap:
    """T_(omega_t, x_t) g: the graph at index t+1 whose graph lies in f~(graph g).

    With ``cone`` (the adapted norm at t+1) the output's Lipschitz constant
    is checked against ``cone_bound`` on |a| <= cone_radius.
    """
    radius = g.radius if radius is None else radius
    n = g.n if n is None else n
    target = field_chart(field_, t + 1)
    out = transform_between(system, field_.window.symbol(t), g, target, radius, n, index=t + 1)
    if abs(out.values[len(out.values) // 2]).max() > 1e-10 and np.abs(g.values[len(g.values) // 2]).max() <= 1e-12:
        raise TransformUndefined("transformed graph does not pass through the orbit point")
    if cone is not None:
        lip = graph_lipschitz(out, cone, cone_radius)
        out.info["lipschitz"] = lip
        if lip > cone_bound:
            raise ConeConditionError(f"output graph has Lipschitz constant {lip:.4f} > {cone_bound}", lip)
    return out


def graph_lipschitz(g: GraphMap, an: AdaptedNorm | None, radius=None) -> float:
    nu = ncs = None
    if an is not None:
        nu = ncs = an
    return max(g.secant_lipschitz(nu, ncs, radius), g.slope_lipschitz(nu, ncs, radius))


@dataclass
class UnstableResult:
    graph: GraphMap
    distances: list             # sup |A_j - B_j| of two chains offset by one start
    rate: float
    iterations: int

    @property
    def converged(self) -> bool:
        return bool(self.rate < 1)


def iterate_to_unstable(system: RandomSystem, field_: SplittingField, t: int, k: int, radius: float,
                        spacing: float, initial=None, cone_norms: bool = False, cone_radius=None,
                        N: int = 40, lambda0=None, eps0=None, certify: bool = True) -> UnstableResult:
    """Transforms of the zero graph from index t-k up to t.

    With ``certify`` a second chain started one index later is carried
    along; the sup-distances between the chains give the convergence rate.
    """
    n = grid_size(radius, spacing)
    norms = {}

    def an(j):
        if not cone_norms:
            return None
        if j not in norms:
            norms[j] = adapted_norm(field_, j, N, lambda0, eps0)
        return norms[j]

    def start(j):
        if initial is None:
            return zero_graph(field_chart(field_, j), radius, n, j)
        return initial(field_chart(field_, j), radius, n, j)

    A = start(t - k)
    B = None
    dists = []
    for j in range(t - k, t):
        A = graph_transform(system, field_, j, A, cone=an(j + 1), cone_radius=cone_radius)
        if not certify:
            continue
        if B is None:
            B = start(j + 1)
        else:
            B = graph_transform(system, field_, j, B)
        dists.append(A.sup_distance(B))
    d = np.asarray(dists)
    if not certify:
        return UnstableResult(A, dists, np.nan, k)
    ok = d > 1e-14
    if ok.sum() >= 2:
        idx = np.nonzero(ok)[0]
        rate = float(np.exp(np.polyfit(idx, np.log(d[idx]), 1)[0]))
    else:
        rate = 0.0
    return UnstableResult(A, dists, rate, k)


# ----------------------------------------------- contraction measurement

def random_lipschitz_graph(chart: Chart, radius: float, n: int, rng, lip: float, an: AdaptedNorm | None,
                           index=0, modes: int = 4) -> GraphMap:
    """Smooth random g with g(0)=0 scaled to Lipschitz constant ``lip`` (adapted norm if given)."""
    g = zero_graph(chart, radius, n, index)
    a = g.nodes()
    ku, kcs = chart.k_u, chart.k_cs
    vals = np.zeros((len(a), kcs))
    slopes = np.zeros((len(a), kcs, ku))
    for _ in range(modes):
        freq = rng.uniform(0.5, 3.0, ku) * np.pi / radius
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.standard_normal(kcs) / modes
        arg = a @ freq + phase
        vals += np.sin(arg)[:, None] * amp - np.sin(phase) * amp
        slopes += (np.cos(arg)[:, None, None] * amp[None, :, None]) * freq[None, None, :]
    g = replace(g, values=vals, slopes=slopes)
    L = graph_lipschitz(g, an)
    s = lip / L if L > 0 else 0.0
    return replace(g, values=vals * s, slopes=slopes * s)


def contraction_ratios(system: RandomSystem, field_: SplittingField, t: int, radius: float, n: int,
                       pairs: int, seed: int = 0, N: int = 40, lambda0=None, eps0=None) -> np.ndarray:
    """|||T g - T h||| / |||g - h||| for random pairs in the class W (adapted norms)."""
    rng = np.random.default_rng(seed)
    an0 = adapted_norm(field_, t, N, lambda0, eps0)
    an1 = adapted_norm(field_, t + 1, N, lambda0, eps0)
    chart = field_chart(field_, t)
    out = np.empty(pairs)
    for p in range(pairs):
        g = random_lipschitz_graph(chart, radius, n, rng, rng.uniform(0.02, 0.1), an0, t)
        h = random_lipschitz_graph(chart, radius, n, rng, rng.uniform(0.02, 0.1), an0, t)
        Tg = graph_transform(system, field_, t, g, radius, n)
        Th = graph_transform(system, field_, t, h, radius, n)
        diff_in = replace(g, values=g.values - h.values)
        diff_out = replace(Tg, values=Tg.values - Th.values)
        out[p] = diff_out.triple_norm(an1, an1) / diff_in.triple_norm(an0, an0)
    return out


# ----------------------------------------------- backward (stable) graphs

def backward_graph_transform(system: RandomSystem, field_: SplittingField, t: int, h: GraphMap,
                             radius: float | None = None, n: int | None = None) -> GraphMap:
    """h' at index t-1 with f~(graph h') inside graph h; h is a graph over E^s with values in E^u.

    Graph charts here are swapped: Bu of the chart holds the E^s basis.
    """
    if field_.k_c:
        raise UnsupportedCase("backward graph transform needs E^c = {0}")
    radius = h.radius if radius is None else radius
    n = h.n if n is None else n
    i = field_._i(t - 1)
    src = Chart(field_.point(t - 1), field_.S[i], field_.U[i])
    dst = h.chart
    shell = zero_graph(src, radius, n, t - 1)
    S_nodes = shell.nodes()
    M = len(S_nodes)
    ks, ku = src.k_u, src.k_cs
    fmap = connecting_map(system, field_, t - 1)
    sym = field_.window.symbol(t - 1)
    Dinv = dst.inverse
    x0 = src.origin

    def residual(Uv):
        z = src.displacement(S_nodes, Uv)
        y = fmap(z)
        c = y @ Dinv.T
        s_img, u_img = c[:, :ks], c[:, ks:]
        return u_img - h(s_img), z, s_img

    J0 = field_.jac(t - 1)
    Uv = np.zeros((M, ku))
    for it in range(NEWTON_CAP):
        r, z, s_img = residual(Uv)
        rn = np.abs(r).max(axis=1)
        if np.all(rn <= NEWTON_TOL * max(1, radius)):
            break
        Jx = system.jac_symbols(np.full(M, sym), x0 + z)
        Dz = np.einsum("ij,mjk->mik", Dinv, Jx)
        dS = Dz[:, :ks, :] @ src.Bcs
        dU = Dz[:, ks:, :] @ src.Bcs
        Jr = dU - h.derivative(s_img) @ dS
        Uv = Uv - np.linalg.solve(Jr, r[..., None])[..., 0]
    r, z, s_img = residual(Uv)
    rn = np.abs(r).max(axis=1)
    if rn.max() > 1e-10:
        raise TransformUndefined(f"backward transform Newton residual {rn.max():.3e}", S_nodes[rn > 1e-10], float(rn.max()))
    Jx = system.jac_symbols(np.full(M, sym), x0 + z)
    Dz = np.einsum("ij,mjk->mik", Dinv, Jx)
    dS, dU = Dz[:, :ks, :], Dz[:, ks:, :]
    # implicit slope of h': dU (Bs + Bu H) = Dh dS (Bs + Bu H)
    Dh = h.derivative(s_img)
    A = dU @ src.Bcs - Dh @ dS @ src.Bcs
    Bm = Dh @ dS @ src.Bu - dU @ src.Bu
    H = np.linalg.solve(A, Bm)
    out = replace(shell, values=Uv, slopes=H)
    out.info = {"residual": float(rn.max()), "newton_iterations": it + 1}
    return out


def stable_chart(field_: SplittingField, t: int) -> Chart:
    i = field_._i(t)
    return Chart(field_.point(t).copy(), field_.S[i].copy(), field_.U[i].copy())


def stable_contraction(system, field_: SplittingField, t: int, hprime: GraphMap, an_prev: AdaptedNorm,
                       an_t: AdaptedNorm, pairs: int = 50, seed: int = 0) -> float:
    """max |f~ z1 - f~ z2|'_t / |z1 - z2|'_{t-1} over node pairs of graph h' at t-1."""
    rng = np.random.default_rng(seed)
    pts = hprime.displacements()
    fmap = connecting_map(system, field_, t - 1)
    img = fmap(pts)
    i = rng.integers(0, len(pts), pairs)
    j = rng.integers(0, len(pts), pairs)
    keep = i != j
    num = an_t(img[i[keep]] - img[j[keep]])
    den = an_prev(pts[i[keep]] - pts[j[keep]])
    return float(np.max(num / den))


# ------------------------------------------------------ characterisation

@dataclass
class MembershipResult:
    accepted: bool
    reason: str
    escape_step: int | None
    rate: float | None
    norms: list


def backward_preimages(system: RandomSystem, field_: SplittingField, t: int, v, n: int, radius):
    """v_k with f~ chain (v_k) = v for k=0..n, stopping when |v_k| exceeds radius(k)."""
    cur = np.asarray(v, dtype=float)
    out = [cur]
    for k in range(1, n + 1):
        j = t - k
        fmap = connecting_map(system, field_, j)
        J = field_.jac(j)
        z = np.linalg.solve(J, cur)
        for _ in range(NEWTON_CAP):
            r = fmap(z) - cur
            if np.abs(r).max() <= 1e-14 * max(1.0, np.abs(cur).max()):
                break
            Jz = system.jac(field_.window.symbol(j), field_.point(j) + z)
            z = z - np.linalg.solve(Jz, r)
        out.append(z)
        cur = z
        if system.ambient_norm(z) > radius(k):
            return out, k
    return out, None


def membership_test(system: RandomSystem, field_: SplittingField, t: int, v, n: int, lam: float,
                    radius=None, rate_check: bool | None = None) -> MembershipResult:
    """Accept v (a displacement at index t) if its backward preimages stay in the tubes
    and shrink at rate at least lam/2.

    ``radius`` is a function k -> tube radius in the ambient norm (a constant is accepted).
    """
    if radius is None:
        raise ValueError("tube radius required")
    rad = radius if callable(radius) else (lambda k, r=float(radius): r)
    v = np.asarray(v, dtype=float)
    if system.ambient_norm(v) > rad(0):
        return MembershipResult(False, "outside tube at step 0", 0, None, [])
    pre, esc = backward_preimages(system, field_, t, v, n, rad)
    norms = [float(system.ambient_norm(p)) for p in pre]
    if esc is not None:
        return MembershipResult(False, "tube escape", esc, None, norms)
    if rate_check is None:
        rate_check = field_.k_c > 0
    ln = np.log(np.maximum(norms, 1e-300))
    half = np.arange(n // 2, n + 1)
    rate = float(np.polyfit(half, ln[half], 1)[0]) if norms[0] > 0 else -np.inf
    if norms[0] == 0:
        return MembershipResult(True, "base point", None, -np.inf, norms)
    if rate_check and rate > -lam / 2:
        return MembershipResult(False, "backward rate too slow", None, rate, norms)
    return MembershipResult(True, "backward orbit contracts", None, rate, norms)


def tangent_check(system: RandomSystem, field_: SplittingField, t: int, g: GraphMap, node: int,
                  back: int = 60) -> dict:
    """Tangent plane of the leaf at a grid node against E^u at that point.

    E^u(omega, y) is obtained by pushing a frame forward along the backward
    orbit of y, which is found by Newton from the base point's stored orbit.
    """
    a = g.nodes()[node]
    slope = g.slopes[node]
    tangent = g.chart.Bu + g.chart.Bcs @ slope
    disp = g.displacements(a[None])[0]
    pre, esc = backward_preimages(system, field_, t, disp, back, lambda k: np.inf)
    pts = np.stack([field_.point(t - k) + pre[k] for k in range(len(pre))])[::-1]
    syms = np.array([field_.window.symbol(t - k) for k in range(back, 0, -1)])
    jacs = system.jac_symbols(syms, pts[:-1])
    from .kernels import qr_sweep
    from .oseledets import _generic_frame
    _, Q, _ = qr_sweep(jacs, _generic_frame(system.dim, g.k_u))
    dh = euclidean_subspace_distance(tangent, Q)
    return {"node": a.tolist(), "d_H": dh, "slope": slope.tolist()}


# ----------------------------------------------------------------- stacks

def circle_period(system: RandomSystem, chart: Chart):
    """Length in the chart's u-coordinate of one turn of the periodic coordinate.

    Defined when dim E^u = 1 and the u-coordinate only sees a single
    periodic coordinate (E^cs has no component along it); otherwise None.
    """
    if chart.k_u != 1 or len(system.periodic) == 0:
        return None
    row = chart.inverse[0]
    mask = np.zeros(system.dim, bool)
    mask[list(system.periodic)] = True
    if mask.sum() != 1 or np.abs(row[~mask]).max(initial=0.0) > 1e-12 * np.abs(row).max():
        return None
    return float(abs(row[mask][0]))


def regraph(system: RandomSystem, leaf: GraphMap, center: Chart, radius: float, n: int, index: int,
            fine: int = 4):
    """Re-express a one-dimensional leaf as a graph over the center chart.

    The leaf is lifted continuously, anchored so that its own origin sits at
    its wrapped offset from the center.  Returns None when the projection
    onto the center's u-coordinate is not monotone or does not cover the
    node range.
    """
    if leaf.k_u != 1:
        raise UnsupportedCase("stack re-graphing is implemented for one-dimensional leaves")
    ax = np.linspace(-leaf.radius, leaf.radius, (leaf.n - 1) * fine + 1)[:, None]
    anchor = system.difference(leaf.chart.origin, center.origin)
    rel = anchor + leaf.displacements(ax)
    a_c, b_c = center.coords(rel)
    tangent = leaf.chart.Bu[None, :, 0] + np.einsum("dk,mk->md", leaf.chart.Bcs, leaf.derivative(ax)[..., 0])
    ta, tb = center.coords(tangent)
    A = a_c[:, 0]
    da = np.diff(A)
    if not (np.all(da > 0) or np.all(da < 0)) or np.any(np.abs(ta[:, 0]) < 1e-12):
        return None
    if da[0] < 0:
        A, b_c, ta, tb = A[::-1], b_c[::-1], ta[::-1], tb[::-1]
    out = zero_graph(center, radius, n, index)
    nodes = out.nodes()[:, 0]
    if A[0] > nodes[0] + 1e-12 or A[-1] < nodes[-1] - 1e-12:
        return None
    k = b_c.shape[1]
    vals = np.empty((len(nodes), k))
    slopes = np.empty((len(nodes), k, 1))
    sl = tb / ta[:, :1]
    for j in range(k):
        vals[:, j] = np.interp(nodes, A, b_c[:, j])
        slopes[:, j, 0] = np.interp(nodes, A, sl[:, j])
    return replace(out, values=vals, slopes=slopes, info={"anchor": anchor.tolist()})


def interpolation_tolerance(values: np.ndarray) -> float:
    """Piecewise-linear interpolation error bound max|second difference|/8 of a 1-d table."""
    if len(values) < 3:
        return 0.0
    return float(np.abs(np.diff(values, 2, axis=0)).max() / 8)


@dataclass
class StackChart:
    center: Chart
    index: int
    leaves: list                # GraphMap over the central chart
    sigma: np.ndarray           # E^cs offsets of each leaf at a = 0
    multiplicity: np.ndarray    # number of sampled base points merged into each leaf
    dropped: list
    tolerance: float            # grid resolution: leaves closer than 10x this are identical
    period: float | None = None  # u-length of one turn for full-circle stacks
    info: dict = field(default_factory=dict)

    @property
    def radius(self):
        return self.leaves[0].radius

    def values(self) -> np.ndarray:
        return np.stack([l.values for l in self.leaves])

    def pairwise(self):
        """(sup distance, min pointwise separation) matrices between leaves."""
        V = self.values()
        L = len(V)
        sup = np.zeros((L, L))
        sep = np.zeros((L, L))
        for i in range(L):
            d = np.linalg.norm(V - V[i], axis=-1)
            sup[i] = d.max(axis=1)
            sep[i] = d.min(axis=1)
        return sup, sep

    def identical_or_disjoint(self) -> bool:
        """Distinct leaves stay 10 grid tolerances apart and merged clusters never cross."""
        if len(self.leaves) < 2:
            return self.info.get("max_cluster_spread", 0.0) <= 100 * self.tolerance
        _, sep = self.pairwise()
        iu = np.triu_indices(len(sep), 1)
        return bool(np.all(sep[iu] >= 10 * self.tolerance)
                    and self.info.get("max_cluster_spread", 0.0) <= 100 * self.tolerance)

    def gap_quantile(self, q: float = 0.9) -> float:
        """Quantile of each leaf's separation from its nearest neighbour."""
        if len(self.leaves) < 2:
            return np.inf
        _, sep = self.pairwise()
        np.fill_diagonal(sep, np.inf)
        return float(np.quantile(sep.min(axis=1), q))

    def chart_map(self, leaf: int, a):
        """Psi(sigma_leaf, a): ambient displacement from the stack center."""
        return self.leaves[leaf].displacements(a)

    def local_coords(self, system: RandomSystem, X):
        """(a, b) center-chart coordinates of ambient points, periodic coordinates wrapped."""
        return self.center.coords(system.difference(np.atleast_2d(X), self.center.origin))

    def assign(self, system: RandomSystem, X, tol: float | None = None):
        """Nearest leaf of each point at its own u-coordinate.

        Returns (leaf index or -1, distance, a).  Points outside the node
        range or farther than ``tol`` (default three times the 90% quantile
        of nearest-neighbour leaf gaps) are unassigned.
        """
        from .kernels import nearest_leaf
        a, b = self.local_coords(system, X)
        a = a[:, 0]
        g = self.leaves[0]
        f = (a + g.radius) / g.spacing
        cell = np.clip(np.floor(f).astype(np.int64), 0, g.n - 2)
        w = np.clip(f - cell, 0.0, 1.0)
        idx, dist = nearest_leaf(self.values(), cell, w, b)
        if tol is None:
            gq = self.gap_quantile()
            tol = 3 * gq if np.isfinite(gq) else np.inf
        out = (np.abs(a) > g.radius + 1e-12) | (dist > tol)
        idx = np.where(out, -1, idx)
        return idx, dist, a

    def continuity_modulus(self):
        """Largest leaf sup-distance relative to the sigma distance, over sigma-neighbours."""
        if len(self.leaves) < 2:
            return 0.0
        order = np.lexsort(self.sigma.T[::-1])
        V = self.values()[order]
        s = self.sigma[order]
        num = np.linalg.norm(np.diff(V, axis=0), axis=-1).max(axis=1)
        den = np.linalg.norm(np.diff(s, axis=0), axis=1)
        return float(np.max(num / np.maximum(den, 1e-300)))


def _clusters(sep: np.ndarray, thresh: float):
    """Connected components of the graph {sep < thresh} (union-find)."""
    parent = list(range(len(sep)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero(np.triu(sep < thresh, 1))):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(len(sep)):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def build_stack(system: RandomSystem, windows: list, center_field: SplittingField, t: int = 0,
                r2: float = np.inf, radius: float | None = None, spacing: float = 1e-3, k: int = 30,
                leaf_radius: float | None = None, full_circle: bool = False,
                grid_tol: float | None = None, max_leaves: int | None = None) -> StackChart:
    """Leaves through sampled attractor points near the center, re-graphed over the center chart.

    ``windows`` are stored orbit windows over the same base point as the
    center, each passing through one sampled point at index t.  With
    ``full_circle`` the central chart covers exactly one turn of the
    periodic coordinate and each leaf is computed over a full turn in its
    own chart first.  Leaves are identified when they come within
    10 * grid_tol of each other; grid_tol defaults to the measured
    interpolation error of the leaf tables.
    """
    center = field_chart(center_field, t)
    ku = center_field.k_u
    period = None
    if full_circle:
        period = circle_period(system, center)
        if period is None:
            raise UnsupportedCase("full-circle stacks need a one-dimensional E^u along a single periodic coordinate")
        radius = period / 2
    if radius is None:
        raise ValueError("radius required for local stacks")
    n = grid_size(radius, spacing)
    leaves, mult, dropped, tols = [], [], [], []
    for w in windows:
        if max_leaves is not None and len(leaves) >= max_leaves:
            break
        y = w.at(t)
        if system.ambient_norm(system.difference(y, center.origin)) > r2:
            continue
        if leaves and grid_tol is not None:
            # already represented: skip the transforms
            tmp = StackChart(center, t, leaves, np.zeros((len(leaves), center.k_cs)), np.asarray(mult), [], grid_tol)
            i, d, _ = tmp.assign(system, y[None], tol=10 * grid_tol)
            if i[0] >= 0:
                mult[int(i[0])] += 1
                continue
        f = splitting_field(system, w, ku)
        chart = field_chart(f, t)
        if full_circle:
            p_leaf = circle_period(system, chart)
            if p_leaf is None:
                dropped.append({"point": y.tolist(), "reason": "leaf chart does not wind around the circle"})
                continue
            lr = 1.02 * p_leaf + 4 * spacing if leaf_radius is None else leaf_radius
        else:
            lr = radius + r2 + 4 * spacing if leaf_radius is None else leaf_radius
        try:
            res = iterate_to_unstable(system, f, t, k, lr, spacing, certify=False)
        except (TransformUndefined, DynamicsError) as e:
            dropped.append({"point": y.tolist(), "reason": f"graph transform failed: {e}"})
            continue
        lg = regraph(system, res.graph, center, radius, n, t)
        if lg is None:
            dropped.append({"point": y.tolist(), "reason": "projection onto central E^u not invertible"})
            continue
        lg.info.update(base_point=y.tolist(), field=f, leaf_radius=lr)
        leaves.append(lg)
        mult.append(1)
        tols.append(interpolation_tolerance(lg.values))
    tol = grid_tol if grid_tol is not None else (max(tols) if tols else 0.0)
    tol = max(tol, 1e-12)
    spread = 0.0
    if len(leaves) > 1:
        V = np.stack([l.values for l in leaves])
        sep = np.array([np.linalg.norm(V - V[i], axis=-1).min(axis=1) for i in range(len(V))])
        groups = _clusters(sep, 10 * tol)
        for gr in groups:
            for i in gr[1:]:
                spread = max(spread, float(np.linalg.norm(V[i] - V[gr[0]], axis=-1).max()))
        mult = [int(sum(mult[i] for i in gr)) for gr in groups]
        leaves = [leaves[gr[0]] for gr in groups]
    sigma = (np.stack([l(np.zeros((1, ku)))[0] for l in leaves]) if leaves
             else np.zeros((0, center.k_cs)))
    return StackChart(center, t, leaves, sigma, np.asarray(mult, dtype=int), dropped, tol, period,
                      {"r2": r2, "radius": radius, "spacing": spacing, "iterations": k,
                       "max_cluster_spread": spread, "samples": int(sum(mult))})


def export_stack_csv(stack: StackChart, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        kcs = stack.center.k_cs
        w.writerow(["leaf", "u"] + [f"g{j}" for j in range(kcs)])
        for i, l in enumerate(stack.leaves):
            for a, v in zip(l.nodes(), l.values):
                w.writerow([i, repr(float(a[0]))] + [repr(float(x)) for x in v])
