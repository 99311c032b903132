"""Lyapunov spectra, Oseledets splittings and Lyapunov-adapted norms.

Splittings are computed along a stored orbit window.  The unstable bundle
comes from pushing a frame forward with re-orthonormalisation; the
center-stable bundle is the orthogonal complement of the most expanded
directions of the transposed cocycle pulled back from the future, which
is the same subspace as the span of the trailing right singular vectors
of the forward cocycle but computed without forming the product.

Each bundle carries its restricted one-step maps (small k x k matrices)
so that the adapted-norm series never iterate a full-space vector in a
direction where rounding errors would be amplified.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import qr_sweep
from .norm_geometry import (Norm, SplitProjection, Subspace, ball_volumes, euclidean_subspace_distance,
                            projection_from_splitting, section_vertices, sphere_points)
from .rds_core import (BasePoint, DynamicsError, OrbitWindow, RandomSystem, compose_forward,
                       estimate_tail_contraction, forward_many, orbit_jacobians, orbit_window,
                       symbol_jacobians)


class SpectrumError(DynamicsError):
    pass


class ConvergenceError(DynamicsError):
    def __init__(self, msg, rate=None):
        super().__init__(msg)
        self.rate = rate


class IllSeparatedSpectrum(DynamicsError):
    pass


class SeriesDivergence(DynamicsError):
    pass


# ---------------------------------------------------------------- spectrum

@dataclass
class LyapunovSpectrum:
    exponents: np.ndarray          # clustered, descending
    multiplicities: np.ndarray
    stderr: np.ndarray             # per clustered exponent
    raw: np.ndarray                # unclustered top-k estimates
    raw_stderr: np.ndarray
    n_steps: int
    degenerate: bool = False

    @property
    def dims(self):
        """(dim E^u, dim E^c, dim E^s) among the computed directions."""
        tol = 3 * self.raw_stderr + 1e-9
        c = np.abs(self.raw) <= tol
        return int(np.sum((self.raw > 0) & ~c)), int(np.sum(c)), int(np.sum((self.raw < 0) & ~c))

    @property
    def sum_positive(self) -> float:
        ku = self.dims[0]
        return float(self.raw[:ku].sum())

    def sum_positive_stderr(self, block_sums=None) -> float:
        ku = self.dims[0]
        return float(np.sqrt(np.sum(self.raw_stderr[:ku] ** 2)))

    @property
    def lambda_plus(self) -> float:
        pos = self.raw[self.raw > 0]
        return float(pos.min()) if len(pos) else np.nan

    @property
    def lambda_minus(self) -> float:
        neg = self.raw[self.raw < 0]
        return float(neg.max()) if len(neg) else np.nan

    def to_json(self):
        return {"exponents": [float(x) for x in self.exponents],
                "multiplicities": [int(m) for m in self.multiplicities],
                "stderr": [float(s) for s in self.stderr],
                "raw": [float(x) for x in self.raw],
                "n_steps": int(self.n_steps), "degenerate": bool(self.degenerate)}


def _block_stderr(increments: np.ndarray, blocks: int = 32) -> np.ndarray:
    n = len(increments)
    blocks = max(2, min(blocks, n))
    m = n // blocks
    means = increments[: m * blocks].reshape(blocks, m, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(blocks)


def cluster_exponents(raw, se):
    """Merge neighbours closer than 3 standard errors (plus a rounding floor)."""
    order = np.argsort(-raw)
    raw, se = raw[order], se[order]
    groups = [[0]]
    for i in range(1, len(raw)):
        j = groups[-1][-1]
        if abs(raw[i] - raw[j]) <= 3 * max(se[i], se[j]) + 1e-9:
            groups[-1].append(i)
        else:
            groups.append([i])
    ex = np.array([raw[g].mean() for g in groups])
    mult = np.array([len(g) for g in groups])
    gse = np.array([se[g].max() / np.sqrt(len(g)) for g in groups])
    return ex, mult, gse


def _generic_frame(d, k, seed=12345):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return q


def qr_spectrum(system: RandomSystem, omega: BasePoint, x, n: int, k: int | None = None,
                frame=None, chunk: int = 20000, n_burn: int = 0) -> LyapunovSpectrum:
    """Top-k Lyapunov exponents by re-orthonormalised cocycle products."""
    d = system.dim
    k = d if k is None else k
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= dimension")
    if n < 1:
        raise ValueError("need n >= 1")
    Q = _generic_frame(d, k) if frame is None else np.linalg.qr(np.asarray(frame, float))[0]
    x = np.asarray(x, dtype=float)
    if n_burn:
        x = forward_many(system, [omega], x[None], n_burn)[0]
        omega = omega.shift(n_burn)
    logs = np.empty((n, k))
    pos = 0
    while pos < n:
        m = min(chunk, n - pos)
        if system.linear_cocycle:
            jacs = symbol_jacobians(system, omega, pos, m)
        else:
            traj = compose_forward(system, omega.shift(pos), x, m)
            jacs = orbit_jacobians(system, traj)
            x = traj.end
        logs[pos:pos + m], Q, _ = qr_sweep(jacs, Q)
        pos += m
    degenerate = bool(np.any(logs < np.log(1e-14)))
    raw = logs.mean(axis=0)
    se = _block_stderr(logs)
    ex, mult, gse = cluster_exponents(raw, se)
    return LyapunovSpectrum(ex, mult, gse, raw, se, n, degenerate)


def volume_exponent_check(system, omega, x, n, spectrum: LyapunovSpectrum | None = None):
    """Sum of all exponents against the Birkhoff average of log|det Df|."""
    if spectrum is None:
        spectrum = qr_spectrum(system, omega, x, n)
    if system.linear_cocycle:
        jacs = symbol_jacobians(system, omega, 0, n)
    else:
        jacs = orbit_jacobians(system, compose_forward(system, omega, x, n))
    birk = float(np.mean(np.linalg.slogdet(jacs)[1]))
    total = float(spectrum.raw.sum())
    return {"sum_exponents": total, "birkhoff_logdet": birk,
            "relative_error": abs(total - birk) / max(abs(birk), 1e-300)}


# --------------------------------------------------------- splitting field

@dataclass
class SplittingField:
    """Oseledets bundles along a stored orbit window.

    Index t runs over window indices -back..fwd.  ``U[t]`` (d x k_u) spans
    E^u, ``S[t]`` spans E^cs (E^s when a center block is present) and
    ``C[t]`` spans E^c.  ``Ru[t]`` is the matrix of Df restricted to
    E^u from index t to t+1 in these bases; likewise ``Rs`` and ``Rc``.
    """

    system: RandomSystem
    window: OrbitWindow
    jacobians: np.ndarray
    k_u: int
    k_c: int
    U: np.ndarray
    S: np.ndarray
    C: np.ndarray | None
    Ru: np.ndarray
    Rs: np.ndarray
    Rc: np.ndarray | None
    u_logs: np.ndarray
    cs_gap: np.ndarray
    n_conv: int

    @property
    def back(self):
        return self.window.back

    @property
    def fwd(self):
        return self.window.fwd

    def _i(self, t):
        i = t + self.window.back
        if not 0 <= i < len(self.U):
            raise IndexError(f"index {t} outside the stored window")
        return i

    def valid_range(self, N: int = 0):
        """Indices where both bundles are converged and N steps of history/future exist."""
        return -self.back + self.n_conv + N, self.fwd - self.n_conv - N

    def point(self, t):
        return self.window.at(t)

    def jac(self, t):
        return self.jacobians[self._i(t)]

    def unstable(self, t) -> Subspace:
        return Subspace(self.U[self._i(t)], self.system.ambient_norm)

    def centerstable(self, t) -> Subspace:
        i = self._i(t)
        B = self.S[i] if self.C is None else np.hstack([self.C[i], self.S[i]])
        return Subspace(B, self.system.ambient_norm)

    def center(self, t) -> Subspace | None:
        return None if self.C is None else Subspace(self.C[self._i(t)], self.system.ambient_norm)

    def stable(self, t) -> Subspace:
        return Subspace(self.S[self._i(t)], self.system.ambient_norm)

    def splitting(self, t) -> "OseledetsSplitting":
        Eu, Ecs = self.unstable(t), self.centerstable(t)
        pu = projection_from_splitting(Eu, Ecs)
        return OseledetsSplitting(self.window.base.shift(t), self.point(t), Eu, Ecs, self.center(t),
                                  pu, pu.complement())

    def equivariance_residual(self, t) -> dict:
        """d_H(Df E(t), E(t+1)) for both bundles, Euclidean principal-angle distance."""
        i = self._i(t)
        J = self.jacobians[i]
        ru = euclidean_subspace_distance(J @ self.U[i], self.U[i + 1])
        Bcs = self.centerstable(t).basis
        Bcs1 = self.centerstable(t + 1).basis
        rcs = euclidean_subspace_distance(J @ Bcs, Bcs1)
        return {"unstable": ru, "centerstable": rcs}


def _orth_complement(G):
    d = G.shape[0]
    q, _ = np.linalg.qr(G, mode="complete")
    return q[:, G.shape[1]:] if G.shape[1] < d else np.zeros((d, 0))


def _intersection(A, B, tol=1e-8):
    """Orthonormal basis of span(A) intersect span(B)."""
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    u, s, vt = np.linalg.svd(qa.T @ qb)
    k = int(np.sum(s > 1 - tol))
    return qa @ u[:, :k]


def splitting_field(system: RandomSystem, window: OrbitWindow, k_u: int, k_c: int = 0,
                    n_conv: int | None = None, seed: int = 12345) -> SplittingField:
    d = system.dim
    if not 0 < k_u < d and not (k_u == d):
        raise ValueError("k_u out of range")
    jacs = system.jac_symbols(window.symbols, window.points[:-1])
    L = len(jacs)
    top = k_u + k_c
    F0 = _generic_frame(d, max(top, 1), seed)
    u_logs, _, frames = qr_sweep(jacs, F0, record=True)
    U = np.ascontiguousarray(frames[:, :, :k_u])
    # transposed cocycle pulled back from the end of the window
    G0 = _generic_frame(d, max(top, 1), seed + 1)
    _, _, gframes = qr_sweep(np.ascontiguousarray(np.transpose(jacs[::-1], (0, 2, 1))), G0, record=True)
    gframes = gframes[::-1]
    S = np.stack([_orth_complement(g[:, :top]) for g in gframes]) if top < d else np.zeros((L + 1, d, 0))
    C = None
    if k_c:
        Scs = [_orth_complement(g[:, :k_u]) for g in gframes]
        C = np.stack([_intersection(frames[i][:, :top], Scs[i]) for i in range(L + 1)])
        if C.shape[2] != k_c:
            raise IllSeparatedSpectrum("center bundle could not be isolated")
    Ru = np.einsum("tdk,tde,tel->tkl", U[1:], jacs, U[:-1])
    Rs = np.einsum("tdk,tde,tel->tkl", S[1:], jacs, S[:-1])
    Rc = None if C is None else np.einsum("tdk,tde,tel->tkl", C[1:], jacs, C[:-1])
    # separation of growth rates at position k_u: smallest unstable log-rate vs largest cs log-rate
    cs_gap = u_logs[:, k_u - 1] if k_u else np.zeros(L)
    if n_conv is None:
        n_conv = min(L // 4, 60)
    return SplittingField(system, window, jacs, k_u, k_c, U, S, C, Ru, Rs, Rc, u_logs, cs_gap, n_conv)


def split_dims(system: RandomSystem, spectrum: LyapunovSpectrum | None = None, n: int = 4000, seed_x=None):
    """(k_u, k_c) from a short QR run unless a spectrum is supplied."""
    if spectrum is None:
        x = np.asarray(system.initial_state if seed_x is None else seed_x, dtype=float)
        spectrum = qr_spectrum(system, system.base(), x, n, n_burn=200)
    ku, kc, _ = spectrum.dims
    return ku, kc


def field_at(system: RandomSystem, omega: BasePoint, x0, back: int = 120, fwd: int = 120,
             k_u: int | None = None, k_c: int | None = None, n_burn: int = 500, n_conv: int | None = None):
    """Orbit window through omega (after burn-in from x0) and its splitting field."""
    if k_u is None:
        k_u, kc = split_dims(system)
        k_c = kc if k_c is None else k_c
    win = orbit_window(system, omega, x0, back, fwd, n_burn)
    return splitting_field(system, win, k_u, k_c or 0, n_conv)


@dataclass
class OseledetsSplitting:
    base: BasePoint
    point: np.ndarray
    unstable: Subspace
    centerstable: Subspace
    center: Subspace | None
    pi_u: SplitProjection
    pi_cs: SplitProjection

    def spans_ok(self) -> bool:
        M = np.hstack([self.unstable.basis, self.centerstable.basis])
        return np.linalg.matrix_rank(M) == M.shape[0]


def unstable_subspace(system: RandomSystem, omega: BasePoint, x0, n_back: int, k_u: int,
                      tol: float = 1e-6, n_burn: int = 500):
    """E^u at the attractor point over omega; Cauchy certificate between n_back and n_back/2.

    Returns (Subspace, certificate dict).
    """
    win = orbit_window(system, omega, x0, n_back, 0, n_burn)
    jacs = system.jac_symbols(win.symbols, win.points[:-1])
    F0 = _generic_frame(system.dim, k_u)
    _, Qa, _ = qr_sweep(jacs, F0)
    _, Qb, _ = qr_sweep(jacs[n_back - n_back // 2:], F0)
    dh = euclidean_subspace_distance(Qa, Qb)
    if dh > tol:
        raise ConvergenceError(f"unstable frame not converged: d_H={dh:.3e} between n_back and n_back/2",
                               rate=dh)
    return Subspace(Qa, system.ambient_norm), {"d_H": dh, "n_back": n_back, "point": win.at(0)}


def centerstable_subspace(system: RandomSystem, omega: BasePoint, x, n_fwd: int, k_u: int,
                          tol: float = 1e-6):
    """E^cs at (omega, x): complement of the top-k_u right singular directions of Df^n."""
    d = system.dim
    traj = compose_forward(system, omega, x, n_fwd)
    jacs = orbit_jacobians(system, traj)
    T = np.ascontiguousarray(np.transpose(jacs[::-1], (0, 2, 1)))
    G0 = _generic_frame(d, k_u, 777)
    logs, Ga, _ = qr_sweep(T, G0)
    _, Gb, _ = qr_sweep(T[n_fwd - n_fwd // 2:], G0)
    Sa, Sb = _orth_complement(Ga), _orth_complement(Gb)
    dh = euclidean_subspace_distance(Sa, Sb)
    # singular-value separation at position k_u from the full-frame sweep
    _, _, sv = _svd_log_rates(T)
    gap = sv[k_u - 1] - sv[k_u] if k_u < d else np.inf
    if gap < 1e-8:
        raise IllSeparatedSpectrum(f"singular-value gap {gap:.3e} at position {k_u}")
    if dh > tol:
        raise ConvergenceError(f"center-stable frame not converged: d_H={dh:.3e}", rate=dh)
    return Subspace(Sa, system.ambient_norm), {"d_H": dh, "n_fwd": n_fwd, "log_sv_gap": gap}


def _svd_log_rates(T):
    logs, Q, _ = qr_sweep(T, np.eye(T.shape[1]))
    total = logs.sum(axis=0)
    return logs, Q, np.sort(total)[::-1]


# ----------------------------------------------------------- adapted norm

def _extreme_coefficients(B: np.ndarray, norm: Norm, samples=2048, seed=0):
    """Coefficient vectors a whose images B a cover the unit sphere of span(B) for sup purposes.

    Euclidean norms are handled separately (exact SVD); this returns
    vertices for polyhedral norms in dimension <= 3 and a dense sample otherwise.
    """
    E = Subspace(B, norm)
    if norm.polyhedral and E.dim <= 3:
        V = section_vertices(E) if E.dim > 1 else np.stack([B[:, 0], -B[:, 0]]) / norm(B[:, 0])
    else:
        _, V = sphere_points(E, samples, seed)
    return np.linalg.lstsq(B, V.T, rcond=None)[0]


def subspace_operator_norms(B: np.ndarray, images: np.ndarray, norm: Norm) -> np.ndarray:
    """sup_{|B a| = 1} |images[n] a| for each n (norm on both sides)."""
    if len(images) == 0:
        return np.zeros(0)
    if B.shape[1] == 0:
        return np.zeros(len(images))
    if norm.euclidean:
        w = norm._w(B.shape[0])
        _, R0 = np.linalg.qr(w[:, None] * B)
        Rinv = np.linalg.inv(R0)
        M = (w[None, :, None] * images) @ Rinv
        return np.linalg.norm(M, ord=2, axis=(1, 2))
    A = _extreme_coefficients(B, norm)
    return norm(np.transpose(images @ A, (0, 2, 1))).max(axis=1)


@dataclass
class NormBlock:
    name: str
    basis: np.ndarray           # d x k at the base point
    images: np.ndarray          # (n_terms, d, k): Df^{+-n} applied to basis coefficients
    weights: np.ndarray         # series weights per term
    steps: np.ndarray           # signed step index of each term

    def terms(self, coef, norm: Norm):
        """Per-term contributions for coefficient vectors coef (m, k) -> (m, n_terms)."""
        if self.basis.shape[1] == 0:
            return np.zeros((len(coef), len(self.weights)))
        vecs = np.einsum("ndk,mk->mnd", self.images, coef)
        return norm(vecs) * self.weights


@dataclass
class AdaptedNorm:
    """Truncated Lyapunov norm at one orbit point."""

    index: int
    point: np.ndarray
    truncation: int
    lam: float
    lambda0: float
    eps0: float
    ambient: Norm
    blocks: dict
    projection_basis: np.ndarray
    constants: dict = field(default_factory=dict)

    def coefficients(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        coef = np.linalg.solve(self.projection_basis, p.T).T
        out, pos = {}, 0
        for name in ("u", "c", "s"):
            if name in self.blocks:
                k = self.blocks[name].basis.shape[1]
                out[name] = coef[:, pos:pos + k]
                pos += k
        return out

    def block_terms(self, p):
        co = self.coefficients(p)
        return {name: self.blocks[name].terms(co[name], self.ambient) for name in co}

    def block_norms(self, p, N: int | None = None):
        N = self.truncation if N is None else N
        out = {}
        for name, t in self.block_terms(p).items():
            keep = np.abs(self.blocks[name].steps) <= N
            out[name] = t[:, keep].sum(axis=1)
        return out

    def __call__(self, p, N: int | None = None):
        p = np.asarray(p, dtype=float)
        bn = self.block_norms(p, N)
        val = np.max(np.stack(list(bn.values())), axis=0)
        return val if p.ndim > 1 else float(val[0])

    def tail_estimate(self, p):
        """Geometric remainder beyond N, from the average ratio over the last half of the terms."""
        out = {}
        N = self.truncation
        for name, t in self.block_terms(p).items():
            st = np.abs(self.blocks[name].steps)
            last = t[:, st == N].sum(axis=1)
            mid = t[:, st == N // 2].sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                rho = np.where(mid > 0, (last / mid) ** (1.0 / (N - N // 2)), 0.0)
            rho = np.clip(np.nan_to_num(rho), 0, 1 - 1e-12)
            out[name] = last * rho / (1 - rho)
        return out

    def sandwich_bounds(self):
        C = self.constants["C"]
        return 1.0 / 3.0, 3.0 / (1.0 - np.exp(-self.eps0 / 2)) * C ** 2


def default_eps0(lambda0: float) -> float:
    return lambda0 / 20.0


def delta1(lam: float, eps0: float) -> float:
    """Supremum of the delta with e^eps0 + delta < e^(lam/2) < e^lam - delta."""
    d = min(np.exp(lam / 2) - np.exp(eps0), np.exp(lam) - np.exp(lam / 2))
    if d <= 0:
        raise SpectrumError("eps0 too large relative to lambda: no admissible delta")
    return float(d)


def rate_constants(spectrum: LyapunovSpectrum, tail_rate: float | None = None, eps0: float | None = None):
    lp = spectrum.lambda_plus
    lm = spectrum.lambda_minus
    if tail_rate is not None:
        lm = max(lm, tail_rate) if np.isfinite(lm) else tail_rate
    cands = [v for v in (lp, -lm) if np.isfinite(v)]
    if not cands:
        raise SpectrumError("no nonzero exponents")
    lambda0 = float(min(cands))
    eps0 = default_eps0(lambda0) if eps0 is None else float(eps0)
    return lambda0, eps0, lambda0 - eps0


def _block_exponents(R):
    """Lyapunov exponents of a product of small square blocks, by QR."""
    k = R.shape[1]
    if k == 0 or len(R) == 0:
        return np.zeros(0)
    Q = np.eye(k)
    acc = np.zeros(k)
    for M in R:
        Q, T = np.linalg.qr(M @ Q)
        acc += np.log(np.abs(np.diag(T)))
    return acc / len(R)


def field_rate_constants(field_: SplittingField, eps0: float | None = None):
    """(lambda0, eps0, lambda) from the restricted maps stored on the field.

    lambda0 is the smaller of the slowest unstable rate and the slowest
    stable contraction over the converged part of the window.
    """
    lo, hi = field_.valid_range(0)
    i0, i1 = field_._i(lo), field_._i(hi)
    cands = []
    if field_.k_u:
        cands.append(_block_exponents(field_.Ru[i0:i1]).min())
    if field_.S.shape[2]:
        cands.append(-_block_exponents(field_.Rs[i0:i1]).max())
    lambda0 = float(min(cands))
    if lambda0 <= 0:
        raise SpectrumError(f"window rates do not separate from zero (lambda0={lambda0:.3g})")
    eps0 = default_eps0(lambda0) if eps0 is None else float(eps0)
    return lambda0, eps0, lambda0 - eps0


def adapted_norm(field_: SplittingField, t: int, N: int = 40, lambda0: float | None = None,
                 eps0: float | None = None) -> AdaptedNorm:
    if t - N < -field_.back or t + N > field_.fwd:
        raise IndexError(f"adapted norm at {t} needs {N} steps either side of the window")
    if lambda0 is None:
        lambda0, eps0, _ = field_rate_constants(field_, eps0)
    elif eps0 is None:
        eps0 = default_eps0(lambda0)
    lam = lambda0 - eps0
    i = field_._i(t)
    norm = field_.system.ambient_norm
    blocks = {}
    steps = np.arange(N + 1)
    # unstable block: backward images through inverse restricted maps
    if field_.k_u:
        Ut = field_.U[i]
        imgs = [Ut]
        M = np.eye(field_.k_u)
        for n in range(1, N + 1):
            M = np.linalg.solve(field_.Ru[i - n], M)
            imgs.append(field_.U[i - n] @ M)
        blocks["u"] = NormBlock("u", Ut, np.stack(imgs), np.exp(steps * lam), steps)
    if field_.k_c:
        Ct = field_.C[i]
        fwd_imgs, bwd_imgs = [Ct], []
        M = np.eye(field_.k_c)
        for n in range(1, N + 1):
            M = field_.Rc[i + n - 1] @ M
            fwd_imgs.append(field_.C[i + n] @ M)
        M = np.eye(field_.k_c)
        for n in range(1, N + 1):
            M = np.linalg.solve(field_.Rc[i - n], M)
            bwd_imgs.append(field_.C[i - n] @ M)
        st = np.concatenate([steps, -steps[1:]])
        blocks["c"] = NormBlock("c", Ct, np.stack(fwd_imgs + bwd_imgs), np.exp(-np.abs(st) * eps0), st)
    St = field_.S[i]
    if St.shape[1]:
        imgs = [St]
        M = np.eye(St.shape[1])
        for n in range(1, N + 1):
            M = field_.Rs[i + n - 1] @ M
            imgs.append(field_.S[i + n] @ M)
        blocks["s"] = NormBlock("s", St, np.stack(imgs), np.exp(steps * lam), steps)
    basis = np.hstack([b.basis for b in blocks.values()])
    an = AdaptedNorm(t, field_.point(t), N, lam, lambda0, eps0, norm, blocks, basis)
    an.constants = _norm_constants(an, field_, t)
    for name, b in blocks.items():
        if b.basis.shape[1]:
            tn = subspace_operator_norms(b.basis, b.images, norm) * b.weights
            pos = tn > 0
            if pos[0] and pos[-1] and np.log(tn[-1] / tn[0]) > 2 * N * eps0:
                raise SeriesDivergence(f"block {name}: series terms growing at the truncation")
    return an


def _norm_constants(an: AdaptedNorm, field_: SplittingField, t: int) -> dict:
    norm = an.ambient
    rate = an.lambda0 - an.eps0 / 2
    out = {}
    for name, b in an.blocks.items():
        opn = subspace_operator_norms(b.basis, b.images, norm)
        if name == "c":
            denom = np.exp(np.abs(b.steps) * an.eps0 / 2)
        else:
            denom = np.exp(-b.steps * rate)
        out["C_" + name] = float(np.max(opn / denom)) if len(opn) else 0.0
    # projection norms for each block of the splitting
    P = an.projection_basis
    Pinv = np.linalg.inv(P)
    pos = 0
    for name, b in an.blocks.items():
        k = b.basis.shape[1]
        sel = np.zeros(P.shape[1])
        sel[pos:pos + k] = 1
        proj = P @ np.diag(sel) @ Pinv
        out["pi_" + name] = norm.operator_norm(proj)
        pos += k
    out["C"] = float(max(out.values()))
    return out


# ------------------------------------------------------ inequality checks

@dataclass
class HyperbolicReport:
    n_probes: int
    linear_violations: list
    sandwich_violations: list
    nonlinear_violations: list
    max_defect_ratio: float
    min_expansion_margin: float | None
    min_contraction_margin: float | None
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not (self.linear_violations or self.sandwich_violations or self.nonlinear_violations)

    def to_json(self):
        return {"n_probes": self.n_probes, "ok": self.ok,
                "linear_violations": self.linear_violations[:20],
                "sandwich_violations": self.sandwich_violations[:20],
                "nonlinear_violations": self.nonlinear_violations[:20],
                "max_defect_over_tail": self.max_defect_ratio,
                "min_expansion_margin": self.min_expansion_margin,
                "min_contraction_margin": self.min_contraction_margin, **self.details}


def check_linear_inequalities(field_: SplittingField, t: int, an0: AdaptedNorm, an1: AdaptedNorm,
                              probes: int, rng) -> tuple:
    """One-step expansion/contraction inequalities and the norm sandwich at index t.

    Returns (violations, max defect/tail ratio, sandwich violations).
    """
    J = field_.jac(t)
    lam, eps0 = an0.lam, an0.eps0
    viol, sandwich = [], []
    worst = 0.0
    for name, b in an0.blocks.items():
        k = b.basis.shape[1]
        if not k:
            continue
        v = rng.standard_normal((probes, k)) @ b.basis.T
        Jv = v @ J.T
        n0 = an0(v)
        n1 = an1(Jv)
        tail = an0.tail_estimate(v)[name] * np.exp(lam) + an1.tail_estimate(Jv)[name]
        if name == "u":
            defect = np.maximum(np.exp(lam) * n0 - n1, 0)
        elif name == "s":
            defect = np.maximum(n1 - np.exp(-lam) * n0, 0)
        else:
            defect = np.maximum(np.maximum(np.exp(-eps0) * n0 - n1, n1 - np.exp(eps0) * n0), 0)
        ratio = np.where(defect > 0, defect / np.maximum(tail, 1e-300), 0.0)
        worst = max(worst, float(ratio.max()))
        bad = np.nonzero(defect > tail * (1 + 1e-9) + 1e-14 * n0)[0]
        viol += [{"index": int(t), "block": name, "defect": float(defect[j]), "tail": float(tail[j])} for j in bad]
    lo, hi = an0.sandwich_bounds()
    p = rng.standard_normal((probes, field_.system.dim))
    ap = an0(p)
    amb = field_.system.ambient_norm(p)
    ok = (lo * amb <= ap * (1 + 1e-12)) & (ap <= hi * amb * (1 + 1e-12))
    sandwich += [{"index": int(t), "ratio": float(ap[j] / amb[j])} for j in np.nonzero(~ok)[0]]
    return viol, worst, sandwich


def connecting_map(system: RandomSystem, field_: SplittingField, t: int):
    """z -> f(x_t + z) - x_{t+1}, periodic coordinates taken near the linear prediction."""
    x0, x1 = field_.point(t), field_.point(t + 1)
    s = field_.window.symbol(t)
    J = field_.jac(t)

    def ftilde(z):
        z = np.asarray(z, dtype=float)
        y = system.step_symbols(np.full(z.shape[:-1] or (1,), s), np.atleast_2d(x0 + z))
        return system.difference_near(y, x1, np.atleast_2d(z) @ J.T).reshape(z.shape)

    return ftilde


def _nonlinear_pair_check(field_, t, horizon, an, ell, lam, eps0, delta, rng):
    """Expansion of unstable-cone pairs and contraction of center-stable-cone pairs in the tubes."""
    sys_ = field_.system
    chain = [an(t + k) for k in range(horizon + 1)]
    maps = [connecting_map(sys_, field_, t + k) for k in range(horizon)]
    radius = [delta / ell(t + k) for k in range(horizon + 1)]
    exp_margin, con_margin, bad = np.inf, np.inf, []
    for kind in ("u", "cs"):
        B = field_.U[field_._i(t)] if kind == "u" else field_.centerstable(t).basis
        for _ in range(4):
            c = rng.standard_normal(sys_.dim)
            c *= 0.25 * radius[0] / chain[0](c)
            diff = B @ rng.standard_normal(B.shape[1])
            diff *= 0.25 * radius[0] / chain[0](diff)
            seq_u, seq_v = [c + diff / 2], [c - diff / 2]
            for k in range(horizon):
                seq_u.append(maps[k](seq_u[-1]))
                seq_v.append(maps[k](seq_v[-1]))
                if max(chain[k + 1](seq_u[-1]), chain[k + 1](seq_v[-1])) > radius[k + 1]:
                    break
            m = len(seq_u) - 1
            d0 = chain[0](seq_u[0] - seq_v[0])
            dist = [chain[k](seq_u[k] - seq_v[k]) for k in range(m + 1)]
            if kind == "u":
                for k in range(1, m + 1):
                    bound = (np.exp(lam) - delta) ** k * d0
                    exp_margin = min(exp_margin, dist[k] / bound)
                    if dist[k] < bound * (1 - 1e-9):
                        bad.append({"index": int(t), "kind": "expansion", "step": k,
                                    "ratio": float(dist[k] / bound)})
                continue
            # the contraction statement is conditional on the pair being in the cs cone at step m
            bl = chain[m].block_norms(seq_u[m] - seq_v[m])
            if bl.get("u", np.zeros(1))[0] > max(v[0] for kk, v in bl.items() if kk != "u"):
                continue
            rate = np.exp(-lam) + delta if field_.k_c == 0 else np.exp(eps0) + delta
            for k in range(1, m):
                bound = rate ** k * d0
                con_margin = min(con_margin, bound / max(dist[k], 1e-300))
                if dist[k] > bound * (1 + 1e-9):
                    bad.append({"index": int(t), "kind": "contraction", "step": k,
                                "ratio": float(dist[k] / bound)})
    return exp_margin, con_margin, bad


def verify_hyperbolic_estimates(field_: SplittingField, indices, N: int, lambda0: float, eps0: float,
                                delta: float | None = None, probes: int = 100, seed: int = 0,
                                nonlinear_pairs: int = 20, horizon: int = 5, ell=None) -> HyperbolicReport:
    rng = np.random.default_rng(seed)
    lam = lambda0 - eps0
    d1 = delta1(lam, eps0)
    delta = d1 / 2 if delta is None else delta
    sys_ = field_.system
    lin, sand, nonlin = [], [], []
    worst = 0.0
    norms = {}

    def an(t):
        if t not in norms:
            norms[t] = adapted_norm(field_, t, N, lambda0, eps0)
        return norms[t]

    total = 0
    for t in indices:
        v, w, s = check_linear_inequalities(field_, t, an(t), an(t + 1), probes, rng)
        lin += v
        sand += s
        worst = max(worst, w)
        total += probes
    exp_margin, con_margin = np.inf, np.inf
    starts = [t for t in list(indices)[:nonlinear_pairs] if t + horizon + 1 <= field_.valid_range(N)[1]]
    if starts:
        if ell is None:
            env = ell_function(field_, range(min(starts), max(starts) + horizon + 1), N, lambda0, eps0)
            ell = env
        for t in starts:
            em, cm, bad = _nonlinear_pair_check(field_, t, horizon, an, ell, lam, eps0, delta, rng)
            exp_margin, con_margin = min(exp_margin, em), min(con_margin, cm)
            nonlin += bad
    return HyperbolicReport(total, lin, sand, nonlin, worst,
                            None if exp_margin == np.inf else float(exp_margin),
                            None if con_margin == np.inf else float(con_margin),
                            {"lambda": lam, "eps0": eps0, "delta": delta, "delta1": d1, "truncation": N})


# ----------------------------------------------------- tempered envelope

@dataclass
class TemperedEnvelope:
    base_values: np.ndarray       # l' along the window
    values: np.ndarray            # envelope l
    indices: np.ndarray
    eps1: float
    window: int
    boundary_flag: bool
    slope: float

    def __call__(self, t):
        j = int(np.searchsorted(self.indices, t))
        if j >= len(self.indices) or self.indices[j] != t:
            raise IndexError(f"index {t} not on the envelope window")
        return float(self.values[j])

    def envelope_ok(self) -> bool:
        v = self.values
        r = np.exp(self.eps1) * (1 + 1e-12)
        return bool(np.all(v[1:] <= r * v[:-1]) and np.all(v[:-1] <= r * v[1:]) and np.all(v >= self.base_values))


def envelope(values, eps1: float, window: int | None = None):
    """psi(k) = max_m psi'(m) exp(-eps1 |k - m|), restricted to |k - m| <= window."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    idx = np.arange(n)
    out = np.empty(n)
    arg = np.empty(n, dtype=int)
    for k in range(n):
        lo = 0 if window is None else max(0, k - window)
        hi = n if window is None else min(n, k + window + 1)
        cand = values[lo:hi] * np.exp(-eps1 * np.abs(idx[lo:hi] - k))
        j = int(np.argmax(cand))
        out[k] = cand[j]
        arg[k] = lo + j
    return out, arg


def ell_function(field_: SplittingField, indices, N: int, lambda0: float, eps0: float,
                 eps1: float | None = None) -> TemperedEnvelope:
    """l'(t) = 27 (1 - e^{-eps0/2})^{-1} C(t+1)^2 max(1, |f|_C2) and its e^{eps1} envelope."""
    eps1 = eps0 / 10 if eps1 is None else eps1
    indices = np.asarray(list(indices))
    sys_ = field_.system
    c2 = max(m.c2_bound for m in sys_.maps)
    Cs = np.array([adapted_norm(field_, int(t) + 1, N, lambda0, eps0).constants["C"] for t in indices])
    lp = 27.0 / (1 - np.exp(-eps0 / 2)) * Cs ** 2 * max(1.0, c2)
    env, arg = envelope(lp, eps1)
    flag = bool(np.any((arg == 0) & (np.arange(len(arg)) > 0)) or
                np.any((arg == len(arg) - 1) & (np.arange(len(arg)) < len(arg) - 1)))
    n = np.arange(len(Cs)) + 1
    slope = float(np.polyfit(n, np.log(Cs), 1)[0]) if len(Cs) > 2 else 0.0
    return TemperedEnvelope(lp, env, indices, eps1, len(indices), flag, slope)


# ----------------------------------------------------------- det growth

def det_growth(field_: SplittingField, t0: int, n: int, spectrum: LyapunovSpectrum | None = None,
               block: str = "u", method: str = "auto") -> dict:
    """(1/n) log det(Df^n | E) along the window in the ambient norm, against the exponent sum."""
    i0 = field_._i(t0)
    if block == "u":
        R, B0, B1 = field_.Ru[i0:i0 + n], field_.U[i0], field_.U[i0 + n]
    elif block == "cs":
        R, B0, B1 = field_.Rs[i0:i0 + n], field_.S[i0], field_.S[i0 + n]
    elif block == "all":
        J = field_.jacobians[i0:i0 + n]
        val = float(np.sum(np.linalg.slogdet(J)[1]) / n)
        out = {"rate": val, "block": block, "n": n}
        if spectrum is not None:
            se = float(np.sqrt(np.sum(spectrum.raw_stderr ** 2)))
            out.update(expected=float(spectrum.raw.sum()), stderr=se,
                       agrees=bool(abs(val - spectrum.raw.sum()) <= max(3 * se, 1e-9)))
        return out
    else:
        raise ValueError(block)
    logdet = float(np.sum(np.linalg.slogdet(R)[1]))
    norm = field_.system.ambient_norm
    v0, _ = ball_volumes(B0, norm, method)
    v1, _ = ball_volumes(B1, norm, method)
    rate = (logdet + np.log(float(np.ravel(v0)[0])) - np.log(float(np.ravel(v1)[0]))) / n
    out = {"rate": float(rate), "euclidean_rate": logdet / n, "block": block, "n": n}
    if spectrum is not None:
        ku = field_.k_u
        sel = spectrum.raw[:ku] if block == "u" else spectrum.raw[ku:]
        se = float(np.sqrt(np.sum(spectrum.raw_stderr[:ku] ** 2))) if block == "u" else float(
            np.sqrt(np.sum(spectrum.raw_stderr[ku:] ** 2)))
        out.update(expected=float(sel.sum()), stderr=se,
                   agrees=bool(abs(rate - sel.sum()) <= max(3 * se, 1e-9)))
    return out


# ---------------------------------------------- continuity on uniform sets

def attractor_cloud(system: RandomSystem, omega: BasePoint, m: int, back: int, fwd: int,
                    n_burn: int = 500, seed: int = 0, spread: float = 1.0):
    """m attractor points over the same omega, each with its stored orbit window."""
    rng = np.random.default_rng(seed)
    d = system.dim
    X0 = np.asarray(system.initial_state, dtype=float) + spread * rng.uniform(-0.5, 0.5, (m, d))
    X0 = system.wrap(X0)
    start = omega.shift(-back - n_burn)
    X = forward_many(system, [start] * m, X0, n_burn)
    _, hist = forward_many(system, [omega.shift(-back)] * m, X, back + fwd, record=True)
    syms = omega.window(-back, back + fwd)
    return [OrbitWindow(omega, np.ascontiguousarray(hist[:, j]), syms, back) for j in range(m)]


def continuity_on_uniform_set(system: RandomSystem, omega: BasePoint, sample_size: int = 200,
                              ell0: float | None = None, N: int = 20, k_u: int | None = None,
                              bound: float = 0.05, seed: int = 0, lambda0=None, eps0=None) -> dict:
    if k_u is None:
        k_u, _ = split_dims(system)
    back = fwd = max(80, 2 * N + 40)
    wins = attractor_cloud(system, omega, sample_size, back, fwd, seed=seed)
    if lambda0 is None:
        sp = qr_spectrum(system, omega, wins[0].at(0), 4000)
        lambda0, eps0_, _ = rate_constants(sp)
        eps0 = eps0_ if eps0 is None else eps0
    pts, Eu, Ecs, ells = [], [], [], []
    for w in wins:
        f = splitting_field(system, w, k_u)
        an = adapted_norm(f, 0, N, lambda0, eps0)
        ells.append(an.constants["C"])
        pts.append(w.at(0))
        Eu.append(f.U[f._i(0)])
        Ecs.append(f.centerstable(0).basis)
    ells = np.asarray(ells)
    ell0 = float(np.quantile(ells, 0.75)) if ell0 is None else ell0
    keep = np.nonzero(ells <= ell0)[0]
    if len(keep) < 10:
        return {"inconclusive": True, "n_uniform": int(len(keep))}
    P = np.asarray(pts)[keep]
    i, j = np.triu_indices(len(keep), 1)
    dist = system.ambient_norm(system.difference(P[i], P[j]))
    du = np.array([euclidean_subspace_distance(Eu[keep[a]], Eu[keep[b]]) for a, b in zip(i, j)])
    dcs = np.array([euclidean_subspace_distance(Ecs[keep[a]], Ecs[keep[b]]) for a, b in zip(i, j)])
    order = np.argsort(dist)
    dec = np.array_split(order, 10)
    umax = [float(du[g].max()) for g in dec]
    csmax = [float(dcs[g].max()) for g in dec]
    return {"inconclusive": False, "n_uniform": int(len(keep)), "ell0": ell0,
            "decile_max_unstable": umax, "decile_max_centerstable": csmax,
            "smallest_decile_ok": bool(umax[0] <= bound and csmax[0] <= bound),
            "max_unstable": float(du.max()), "max_centerstable": float(dcs.max())}


def equivariance_decay(system, omega, x0, k_u, ns=(10, 20, 40, 80)):
    """Equivariance residual of E^u at index 0 for growing n_back; fitted geometric rate."""
    res = []
    for n in ns:
        w = orbit_window(system, omega, x0, n, 1, 500)
        f = splitting_field(system, w, k_u, n_conv=0)
        res.append(f.equivariance_residual(0)["unstable"])
    res = np.maximum(np.asarray(res), 1e-300)
    ok = res > 1e-15
    rate = float(np.exp(np.polyfit(np.asarray(ns)[ok], np.log(res[ok]), 1)[0])) if ok.sum() >= 2 else 0.0
    return {"n_back": list(ns), "residuals": res.tolist(), "rate": rate}


def tail_rate(system: RandomSystem, omega: BasePoint, x, n: int = 2000):
    if system.tail_block is None:
        return None
    return estimate_tail_contraction(system, omega, x, n)
