"""Subspace geometry in a chosen norm.

Gaps and Hausdorff distances between subspaces, projections along a
splitting, norm-induced volumes on subspaces and the determinant
det(A|E) = m_{AE}(A B_E) / m_E(B_E).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import HalfspaceIntersection
from scipy.spatial import ConvexHull
from scipy.special import gammaln, ndtri
from scipy.stats import qmc


class GeometryError(ValueError):
    """Domain errors of the subspace geometry routines."""


class UnsupportedMethod(GeometryError):
    pass


class SplittingDegenerate(GeometryError):
    pass


class VolumeEstimateError(GeometryError):
    pass


NORM_KINDS = ("l1", "l2", "linf", "weighted")


@dataclass(frozen=True)
class Norm:
    """A norm on R^d.

    ``weighted`` is the weighted Euclidean norm |diag(w) x|_2.
    """

    kind: str = "l2"
    weights: tuple | None = None

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise GeometryError(f"unknown norm kind {self.kind!r}")
        if self.kind == "weighted":
            if self.weights is None or len(self.weights) == 0:
                raise GeometryError("weighted norm needs a weight vector")
            w = tuple(float(x) for x in self.weights)
            if min(w) <= 0:
                raise GeometryError("weights must be positive")
            object.__setattr__(self, "weights", w)
        elif self.weights is not None:
            raise GeometryError(f"{self.kind} norm takes no weights")

    @classmethod
    def parse(cls, spec) -> "Norm":
        if isinstance(spec, Norm):
            return spec
        if isinstance(spec, str):
            return cls(spec)
        if isinstance(spec, dict):
            return cls(spec["kind"], tuple(spec["weights"]) if spec.get("weights") else None)
        raise GeometryError(f"cannot parse norm from {spec!r}")

    def to_json(self):
        return self.kind if self.weights is None else {"kind": self.kind, "weights": list(self.weights)}

    @property
    def euclidean(self) -> bool:
        return self.kind in ("l2", "weighted")

    @property
    def polyhedral(self) -> bool:
        return self.kind in ("l1", "linf")

    def _w(self, d):
        if self.weights is None:
            return np.ones(d)
        if len(self.weights) != d:
            raise GeometryError(f"weight vector has length {len(self.weights)}, ambient dimension is {d}")
        return np.asarray(self.weights)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "l1":
            return np.abs(x).sum(axis=-1)
        if self.kind == "linf":
            return np.abs(x).max(axis=-1)
        if self.kind == "weighted":
            x = x * self._w(x.shape[-1])
        return np.sqrt((x * x).sum(axis=-1))

    def dual(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "l1":
            return np.abs(y).max(axis=-1)
        if self.kind == "linf":
            return np.abs(y).sum(axis=-1)
        if self.kind == "weighted":
            y = y / self._w(y.shape[-1])
        return np.sqrt((y * y).sum(axis=-1))

    def operator_norm(self, A) -> float:
        """Induced norm of a d x d matrix acting on (R^d, self)."""
        A = np.asarray(A, dtype=float)
        if self.kind == "l1":
            return float(np.abs(A).sum(axis=0).max())
        if self.kind == "linf":
            return float(np.abs(A).sum(axis=1).max())
        if self.kind == "weighted":
            w = self._w(A.shape[0])
            A = (w[:, None] * A) / w[None, :]
        return float(np.linalg.norm(A, 2))

    def whiten(self, x):
        """Map to coordinates where a Euclidean norm becomes plain l2."""
        x = np.asarray(x, dtype=float)
        if self.kind == "weighted":
            w = self._w(x.shape[0] if x.ndim == 1 else x.shape[-2])
            return (w[:, None] * x) if x.ndim >= 2 else w * x
        return x

    def equivalence_to_l2(self, d: int) -> float:
        """Constant c with |x|_2 <= c |x| for all x in R^d."""
        if self.kind == "l1":
            return 1.0
        if self.kind == "linf":
            return math.sqrt(d)
        if self.kind == "weighted":
            return 1.0 / min(self._w(d))
        return 1.0


L2 = Norm("l2")


def euclidean_ball_volume(k: int) -> float:
    """w_k = pi^{k/2} / Gamma(k/2 + 1)."""
    return float(np.exp(0.5 * k * np.log(np.pi) - gammaln(0.5 * k + 1.0)))


def _as_basis(basis) -> np.ndarray:
    B = np.asarray(basis, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if B.ndim != 2:
        raise GeometryError("basis must be a d x k matrix")
    return B


class Subspace:
    """A k-dimensional subspace of (R^d, norm) given by a basis matrix."""

    __slots__ = ("basis", "norm")

    def __init__(self, basis, norm: Norm | str = "l2"):
        B = _as_basis(basis)
        if B.shape[1] == 0:
            raise GeometryError("zero subspace")
        if B.shape[1] > B.shape[0]:
            raise GeometryError("more basis vectors than ambient dimension")
        scaled = B / np.linalg.norm(B, axis=0)
        sv = np.linalg.svd(scaled, compute_uv=False)
        if not np.all(np.isfinite(sv)) or sv[-1] <= 1e-10:
            raise GeometryError("basis columns are not linearly independent")
        self.basis = B
        self.norm = Norm.parse(norm)
        self.basis.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    def orthonormal(self) -> np.ndarray:
        """Euclidean orthonormal basis of the same span."""
        q, _ = np.linalg.qr(self.basis)
        return q

    def with_norm(self, norm) -> "Subspace":
        return Subspace(self.basis, norm)

    def image(self, A) -> "Subspace":
        return Subspace(np.asarray(A, dtype=float) @ self.basis, self.norm)

    def contains(self, v, tol=1e-10) -> bool:
        q = self.orthonormal()
        v = np.asarray(v, dtype=float)
        r = v - q @ (q.T @ v)
        return bool(np.linalg.norm(r) <= tol * max(1.0, np.linalg.norm(v)))

    def spans_equal(self, other: "Subspace", tol=1e-10) -> bool:
        if self.dim != other.dim:
            return False
        return euclidean_subspace_distance(self.basis, other.basis) <= tol

    def __repr__(self):
        return f"Subspace(dim={self.dim}, ambient={self.ambient_dim}, norm={self.norm.kind})"


def euclidean_subspace_distance(A, B) -> float:
    """Largest principal-angle sine between spans (l2, closed form)."""
    qa, _ = np.linalg.qr(_as_basis(A))
    qb, _ = np.linalg.qr(_as_basis(B))
    r = qa - qb @ (qb.T @ qa)
    return float(np.linalg.norm(r, 2)) if r.size else 0.0


def coordinate_subspace(d: int, idx, norm="l2") -> Subspace:
    B = np.zeros((d, len(idx)))
    for j, i in enumerate(idx):
        B[i, j] = 1.0
    return Subspace(B, norm)


# ---------------------------------------------------------------- distances


def distance_to_span(V, F, norm: Norm):
    """Distance from each row of V to span(F) and the nearest points.

    Exact for every supported norm: closed form for the Euclidean norms,
    vertex enumeration of the defining linear programs for l1 and linf.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    F = _as_basis(F)
    d, m = F.shape
    if norm.euclidean:
        w = norm._w(d)
        Vw, Fw = V * w, F * w[:, None]
        q, _ = np.linalg.qr(Fw)
        near = (Vw @ q) @ q.T
        dist = np.linalg.norm(Vw - near, axis=1)
        return dist, near / w
    if m == d:
        return np.zeros(len(V)), V.copy()
    if norm.kind == "l1":
        best = np.full(len(V), np.inf)
        near = np.zeros_like(V)
        for rows in itertools.combinations(range(d), m):
            Fs = F[list(rows)]
            if abs(np.linalg.det(Fs)) < 1e-12 * max(1.0, np.abs(Fs).max() ** m):
                continue
            c = np.linalg.solve(Fs, V[:, list(rows)].T).T
            w = c @ F.T
            dist = np.abs(V - w).sum(axis=1)
            better = dist < best
            best = np.where(better, dist, best)
            near[better] = w[better]
        return best, near
    # linf via the dual: max <y, v> over y in ann(F) with |y|_1 <= 1
    best = np.full(len(V), -np.inf)
    arg_rows = np.zeros((len(V), m + 1), dtype=int)
    arg_y = np.zeros((len(V), m + 1))
    for rows in itertools.combinations(range(d), m + 1):
        rows = list(rows)
        Fs = F[rows]
        u, s, vt = np.linalg.svd(Fs.T)
        if s[-1] < 1e-12 * max(1.0, s[0]):
            continue
        y = vt[-1]
        y = y / np.abs(y).sum()
        val = np.abs(V[:, rows] @ y)
        better = val > best
        best = np.where(better, val, best)
        arg_rows[better] = rows
        sign = np.sign(V[:, rows] @ y)
        arg_y[better] = y[None, :] * sign[better, None]
    best = np.maximum(best, 0.0)
    near = np.zeros_like(V)
    for i in range(len(V)):
        rows = arg_rows[i]
        target = V[i, rows] - best[i] * np.sign(arg_y[i])
        c, *_ = np.linalg.lstsq(F[rows], target, rcond=None)
        near[i] = F @ c
    return best, near


@lru_cache(maxsize=64)
def _sphere_directions(k: int, n: int, seed: int) -> np.ndarray:
    if k == 1:
        return np.array([[1.0], [-1.0]])
    sob = qmc.Sobol(d=k, scramble=True, seed=seed)
    m = max(1, int(math.ceil(math.log2(max(n, 2)))))
    u = sob.random_base2(m)[:n]
    u = np.clip(u, 1e-12, 1 - 1e-12)
    z = ndtri(u)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    z.setflags(write=False)
    return z


def sphere_points(E: Subspace, n: int = 4096, seed: int = 0):
    """Quasi-random points on the unit sphere of E in its norm.

    Returns (coefficients in an orthonormal basis of E, ambient points).
    """
    q = E.orthonormal()
    c = np.array(_sphere_directions(E.dim, n, seed))
    v = c @ q.T
    s = E.norm(v)
    return c / s[:, None], v / s[:, None]


def _sphere_distance(V, F: Subspace, near, sphere_sample):
    """Upper estimate of d(v, S_F) from candidate points on S_F.

    The candidates always include the normalised nearest point of F, so
    the value never exceeds twice d(v, F); every candidate lies on S_F,
    so it never falls below d(v, F).
    """
    norm = F.norm
    if norm.euclidean:
        w = norm._w(V.shape[1])
        nn = np.linalg.norm(near * w, axis=1)
        out = np.full(len(V), math.sqrt(2.0))
        ok = nn > 1e-300
        cand = near[ok] / nn[ok, None]
        out[ok] = np.linalg.norm((V[ok] - cand) * w, axis=1)
        return out
    nn = norm(near)
    out = np.full(len(V), np.inf)
    ok = nn > 1e-300
    out[ok] = norm(V[ok] - near[ok] / nn[ok, None])
    if sphere_sample is not None and len(sphere_sample):
        for start in range(0, len(V), 512):
            blk = V[start:start + 512]
            dd = norm(blk[:, None, :] - sphere_sample[None, :, :])
            out[start:start + 512] = np.minimum(out[start:start + 512], dd.min(axis=1))
    return out


@dataclass
class SphereProfile:
    points: np.ndarray      # candidate points of S_E
    to_space: np.ndarray    # d(v, F)
    to_sphere: np.ndarray   # estimate of d(v, S_F)

    @property
    def gap(self) -> float:
        return float(self.to_space.max())

    @property
    def sphere_side(self) -> float:
        return float(self.to_sphere.max())


def _ascent(E: Subspace, objective, starts, step0=0.2, min_step=1e-4, rounds=60):
    """Pattern-search ascent on the sphere of E, batched over starts."""
    q = E.orthonormal()
    k = E.dim
    c = np.array(starts, dtype=float)
    val = objective(c @ q.T / E.norm(c @ q.T)[:, None])
    step = step0
    moves = np.concatenate([np.eye(k), -np.eye(k)])
    for _ in range(rounds):
        trial = c[:, None, :] + step * moves[None, :, :]
        flat = trial.reshape(-1, k)
        pts = flat @ q.T
        pts /= E.norm(pts)[:, None]
        tv = objective(pts).reshape(len(c), -1)
        j = tv.argmax(axis=1)
        improve = tv[np.arange(len(c)), j] > val
        c[improve] = trial[np.arange(len(c)), j][improve]
        val = np.where(improve, tv[np.arange(len(c)), j], val)
        if not improve.any():
            step *= 0.5
            if step < min_step:
                break
    pts = c @ q.T
    return pts / E.norm(pts)[:, None]


def sphere_profile(E: Subspace, F: Subspace, samples: int = 4096, seed: int = 0,
                   refine: bool = True, n_starts: int = 4, sphere_budget: int = 512) -> SphereProfile:
    """Distances from sampled and locally optimised points of S_E to F and S_F."""
    if E.ambient_dim != F.ambient_dim:
        raise GeometryError("subspaces live in different ambient dimensions")
    norm = E.norm
    _, V = sphere_points(E, samples, seed)
    cands = [V]
    if norm.euclidean:
        # the exact maximiser of d(v, F) for Euclidean norms
        w = norm._w(E.ambient_dim)
        qe, _ = np.linalg.qr(E.basis * w[:, None])
        qf, _ = np.linalg.qr(F.basis * w[:, None])
        r = qe - qf @ (qf.T @ qe)
        _, _, vt = np.linalg.svd(r)
        top = (qe @ vt[0]) / w
        cands.append(np.stack([top, -top]) / norm(top))
    Fs = None
    if not norm.euclidean:
        Fs = sphere_points(F, sphere_budget, seed + 1)[1]
    if refine and E.dim > 1 and not norm.euclidean:
        def obj_space(P):
            return distance_to_span(P, F.basis, norm)[0]

        def obj_sphere(P):
            dist, near = distance_to_span(P, F.basis, norm)
            return _sphere_distance(P, F, near, Fs)

        d0 = obj_space(V)
        qe = E.orthonormal()
        order = np.argsort(-d0)[:n_starts]
        starts = V[order] @ qe
        cands.append(_ascent(E, obj_space, starts))
        d1 = obj_sphere(V[order])
        starts = V[np.argsort(-d1)[:n_starts]] @ qe
        cands.append(_ascent(E, obj_sphere, starts))
    P = np.concatenate(cands)
    dist, near = distance_to_span(P, F.basis, norm)
    sph = _sphere_distance(P, F, near, Fs)
    return SphereProfile(P, dist, sph)


def gap(E: Subspace, F: Subspace, samples: int = 4096, seed: int = 0, refine: bool = True) -> float:
    """G(E, F) = sup over the unit sphere of E of the distance to F."""
    return sphere_profile(E, F, samples, seed, refine).gap


def symmetric_gap(E, F, samples=4096, seed=0) -> float:
    return max(gap(E, F, samples, seed), gap(F, E, samples, seed))


def hausdorff_distance(E: Subspace, F: Subspace, samples: int = 4096, seed: int = 0,
                       refine: bool = True) -> float:
    """Hausdorff distance between the unit spheres of E and F."""
    if E.dim != F.dim:
        raise GeometryError(f"dimension mismatch: {E.dim} vs {F.dim}")
    a = sphere_profile(E, F, samples, seed, refine).sphere_side
    b = sphere_profile(F, E, samples, seed, refine).sphere_side
    return max(a, b)


@dataclass
class GapReport:
    gap_ef: float
    gap_fe: float
    hausdorff: float

    @property
    def symmetric_gap(self) -> float:
        return max(self.gap_ef, self.gap_fe)

    def sandwich_holds(self, slack=1e-12) -> bool:
        g = self.symmetric_gap
        return g <= self.hausdorff + slack and self.hausdorff <= 2 * g + slack

    def asymmetry_holds(self, k: int, slack=1e-12) -> bool | None:
        """None when the hypothesis G(E,F) < 1/k does not apply."""
        g = self.gap_ef
        if not g < 1.0 / k:
            return None
        return self.gap_fe <= k * g / (1 - k * g) + slack


def gap_report(E: Subspace, F: Subspace, samples=4096, seed=0, refine=True) -> GapReport:
    """G(E,F), G(F,E) and d_H from one consistent set of sphere candidates."""
    pe = sphere_profile(E, F, samples, seed, refine)
    pf = sphere_profile(F, E, samples, seed, refine)
    return GapReport(pe.gap, pf.gap, max(pe.sphere_side, pf.sphere_side))


# -------------------------------------------------------------- projections


@dataclass(frozen=True)
class SplitProjection:
    range: Subspace
    kernel: Subspace
    matrix: np.ndarray

    @property
    def operator_norm(self) -> float:
        return self.range.norm.operator_norm(self.matrix)

    def complement(self) -> "SplitProjection":
        return SplitProjection(self.kernel, self.range, np.eye(len(self.matrix)) - self.matrix)

    def __call__(self, v):
        return np.asarray(v) @ self.matrix.T


def projection_from_splitting(E: Subspace, F: Subspace) -> SplitProjection:
    """Projection onto E along F."""
    d = E.ambient_dim
    if F.ambient_dim != d or E.dim + F.dim != d:
        raise SplittingDegenerate("E and F do not have complementary dimensions")
    M = np.hstack([E.basis, F.basis])
    sv = np.linalg.svd(M / np.linalg.norm(M, axis=0), compute_uv=False)
    if sv[-1] < 1e-12:
        raise SplittingDegenerate(f"concatenated basis is rank deficient (sigma_min={sv[-1]:.3e})")
    sel = np.zeros((d, d))
    sel[:E.dim, :E.dim] = np.eye(E.dim)
    P = M @ sel @ np.linalg.inv(M)
    P.setflags(write=False)
    return SplitProjection(E, F, P)


# ------------------------------------------------------------------ volumes


@dataclass(frozen=True)
class BallVolume:
    """Lebesgue volume, in basis coordinates, of {c : |B c| <= 1}."""

    value: float
    stderr: float
    method: str
    dim: int

    def __float__(self):
        return float(self.value)

    @property
    def normalizer(self) -> float:
        """Factor turning coordinate volume into m_E, so m_E(ball) = w_k."""
        return euclidean_ball_volume_cached(self.dim) / self.value


@lru_cache(maxsize=None)
def euclidean_ball_volume_cached(k: int) -> float:
    return euclidean_ball_volume(k)


def _polygon_volume(M: np.ndarray, norm: Norm) -> np.ndarray:
    """Exact area of {c in R^2 : |M c| <= 1} for l1/linf, batched over M (n,d,2)."""
    rows = M  # (n, d, 2)
    if norm.kind == "l1":
        normals = rows
    else:
        d = rows.shape[1]
        pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
        if pairs:
            a = np.array([p[0] for p in pairs])
            b = np.array([p[1] for p in pairs])
            normals = np.concatenate([rows[:, a] - rows[:, b], rows[:, a] + rows[:, b]], axis=1)
        else:
            normals = rows
        normals = np.concatenate([normals, rows], axis=1)
    dirs = np.stack([-normals[..., 1], normals[..., 0]], axis=-1)
    dirs = np.concatenate([dirs, -dirs, np.broadcast_to(np.eye(2), (len(M), 2, 2)),
                           -np.broadcast_to(np.eye(2), (len(M), 2, 2))], axis=1)
    ln = np.linalg.norm(dirs, axis=-1)
    zero = ln <= 1e-300
    dirs = np.where(zero[..., None], np.array([1.0, 0.0]), dirs / np.where(zero, 1.0, ln)[..., None])
    ang = np.arctan2(dirs[..., 1], dirs[..., 0])
    order = np.argsort(ang, axis=1)
    dirs = np.take_along_axis(dirs, order[..., None], axis=1)
    img = np.einsum("ndk,nmk->nmd", M, dirs)
    r = norm(img)
    pts = dirs / r[..., None]
    x, y = pts[..., 0], pts[..., 1]
    area = 0.5 * np.abs((x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y).sum(axis=1))
    return area


def _halfspaces(M: np.ndarray, norm: Norm) -> np.ndarray:
    d, k = M.shape
    if norm.kind == "linf":
        A = np.concatenate([M, -M])
    else:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
        A = signs @ M
    return np.hstack([A, -np.ones((len(A), 1))])


def _polytope_volume(M: np.ndarray, norm: Norm) -> float:
    k = M.shape[1]
    hs = _halfspaces(M, norm)
    hs = hs[np.linalg.norm(hs[:, :-1], axis=1) > 1e-14]
    hi = HalfspaceIntersection(hs, np.zeros(k))
    return float(ConvexHull(hi.intersections).volume)


def _box_halfwidths(M: np.ndarray, norm: Norm) -> np.ndarray:
    pinv = np.linalg.pinv(M)  # (k, d)
    return norm.dual(pinv)


def _mc_volume(M: np.ndarray, norm: Norm, samples: int, seed: int):
    k = M.shape[1]
    R = _box_halfwidths(M, norm)
    rng = np.random.default_rng(seed)
    inside = 0
    done = 0
    chunk = 65536
    while done < samples:
        n = min(chunk, samples - done)
        c = (rng.random((n, k)) * 2.0 - 1.0) * R
        inside += int((norm(c @ M.T) <= 1.0).sum())
        done += n
    box = float(np.prod(2.0 * R))
    p = inside / samples
    val = p * box
    se = box * math.sqrt(max(p * (1 - p), 0.0) / samples)
    return val, se


def _resolve_method(norm: Norm, k: int, method: str) -> str:
    if method == "auto":
        if norm.euclidean:
            return "exact"
        if norm.polyhedral and k <= 3:
            return "polytope"
        return "monte_carlo"
    return method


def ball_volumes(M, norm: Norm, method: str = "auto", samples: int = 200_000, seed: int = 0,
                 max_rel_se: float = 1e-2):
    """Volumes of {c : |M_i c| <= 1} for a stack of d x k matrices M_i.

    Returns (values, standard errors); the standard errors are zero for the
    exact and polytope methods.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        M = M[None]
    n, d, k = M.shape
    method = _resolve_method(norm, k, method)
    se = np.zeros(n)
    if method == "exact":
        if not norm.euclidean:
            raise UnsupportedMethod(f"exact volume needs a Euclidean norm, got {norm.kind}")
        Mw = M * norm._w(d)[:, None]
        r = np.linalg.qr(Mw, mode="r")
        dets = np.abs(np.prod(np.diagonal(r, axis1=-2, axis2=-1), axis=-1))
        with np.errstate(divide="ignore"):
            vals = euclidean_ball_volume_cached(k) / dets
        return vals, se
    if method == "polytope":
        if not norm.polyhedral:
            raise UnsupportedMethod(f"polytope volume needs l1 or linf, got {norm.kind}")
        if k > 3:
            raise UnsupportedMethod("polytope volume is limited to dimension <= 3")
        if k == 1:
            return 2.0 / norm(M[..., 0]), se
        if k == 2:
            return _polygon_volume(M, norm), se
        return np.array([_polytope_volume(m, norm) for m in M]), se
    if method == "monte_carlo":
        if k > 6:
            raise UnsupportedMethod("Monte Carlo volume is limited to dimension <= 6")
        vals = np.empty(n)
        for i in range(n):
            vals[i], se[i] = _mc_volume(M[i], norm, samples, seed + i)
            if se[i] > max_rel_se * vals[i]:
                raise VolumeEstimateError(
                    f"relative standard error {se[i] / vals[i]:.3e} exceeds {max_rel_se} at {samples} samples")
        return vals, se
    raise UnsupportedMethod(f"unknown volume method {method!r}")


def unit_ball_volume(E: Subspace, method: str = "auto", samples: int = 200_000, seed: int = 0) -> BallVolume:
    """Volume in the coordinates of E's basis of {c : |basis c| <= 1}.

    The induced measure m_E is this coordinate volume rescaled by
    w_k / value so that m_E(unit ball) = w_k.
    """
    m = _resolve_method(E.norm, E.dim, method)
    v, s = ball_volumes(E.basis, E.norm, m, samples, seed)
    return BallVolume(float(v[0]), float(s[0]), m, E.dim)


def induced_measure(E: Subspace, coord_volume: float, **kw) -> float:
    """m_E of a set whose volume in basis coordinates is coord_volume."""
    vol = unit_ball_volume(E, **kw).value
    return euclidean_ball_volume(E.dim) / vol * coord_volume


def det_batch(A, B, domain_norm: Norm, codomain_norm: Norm, method="auto", samples=200_000,
              seed=0, rank_tol=1e-13):
    """det(A_i | span B_i) for stacks; returns (values, relative standard errors)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 2:
        B = B[None]
    if A.ndim == 2:
        A = np.broadcast_to(A, (len(B),) + A.shape)
    AB = A @ B
    k = B.shape[-1]
    sv = np.linalg.svd(AB, compute_uv=False)
    sv_in = np.linalg.svd(B, compute_uv=False)
    degenerate = sv[:, -1] <= rank_tol * np.maximum(sv[:, 0], 1e-300) * np.maximum(1.0, sv_in[:, 0] / sv_in[:, -1])
    vin, sin = ball_volumes(B, domain_norm, method, samples, seed)
    vout, sout = ball_volumes(np.where(degenerate[:, None, None], B, AB), codomain_norm, method, samples,
                              seed + 7919)
    val = vin / vout
    rel = np.sqrt((sin / vin) ** 2 + (sout / vout) ** 2)
    val = np.where(degenerate, 0.0, val)
    return val, rel


def det_on_subspace(A, E: Subspace, domain_norm=None, codomain_norm=None, method="auto",
                    samples=200_000, seed=0, return_error=False):
    """det(A|E) = m_{A(E)}(A(B_E)) / m_E(B_E); zero when A is not injective on E."""
    dn = Norm.parse(domain_norm) if domain_norm is not None else E.norm
    cn = Norm.parse(codomain_norm) if codomain_norm is not None else dn
    v, rel = det_batch(A, E.basis, dn, cn, method, samples, seed)
    if return_error:
        return float(v[0]), float(rel[0] * v[0])
    return float(v[0])


def gram_det_ratio(A, B) -> float:
    """sqrt(det(G_out^T G_out)) / sqrt(det(G_in^T G_in)) for Euclidean norms."""
    B = _as_basis(B)
    G = np.asarray(A, dtype=float) @ B
    return float(math.sqrt(max(np.linalg.det(G.T @ G), 0.0) / np.linalg.det(B.T @ B)))


# ------------------------------------------------------ determinant checks


def section_vertices(E: Subspace) -> np.ndarray:
    """Vertices of the unit ball of E (polyhedral norms, dim <= 3), ambient coordinates."""
    norm = E.norm
    if not norm.polyhedral:
        raise UnsupportedMethod("vertex enumeration needs a polyhedral norm")
    B = E.basis
    k = E.dim
    if k == 1:
        b = B[:, 0] / norm(B[:, 0])
        return np.stack([b, -b])
    hs = _halfspaces(B, norm)
    hs = hs[np.linalg.norm(hs[:, :-1], axis=1) > 1e-14]
    hi = HalfspaceIntersection(hs, np.zeros(k))
    pts = hi.intersections
    hull = ConvexHull(pts)
    return pts[hull.vertices] @ B.T


def operator_norm_on_subspace(M, E: Subspace, codomain_norm=None, samples=2048, seed=0) -> float:
    """sup over unit vectors v of E of |M v| (exact for Euclidean and polyhedral norms)."""
    cn = Norm.parse(codomain_norm) if codomain_norm is not None else E.norm
    M = np.asarray(M, dtype=float)
    dn = E.norm
    if dn.euclidean and cn.euclidean:
        wi = dn._w(E.ambient_dim)
        wo = cn._w(M.shape[0])
        q, _ = np.linalg.qr(E.basis * wi[:, None])
        return float(np.linalg.norm((wo[:, None] * M) @ (q / wi[:, None]), 2))
    if dn.polyhedral and E.dim <= 6:
        try:
            V = section_vertices(E)
            return float(cn(V @ M.T).max())
        except Exception:  # qhull failure on degenerate input: fall back to sampling
            pass
    _, V = sphere_points(E, samples, seed)
    return float(cn(V @ M.T).max())


def auerbach_basis(E: Subspace, samples=2048, seed=0) -> np.ndarray:
    """Unit basis of E maximising the coordinate volume |det[v_1..v_k]|."""
    k = E.dim
    q = E.orthonormal()
    if E.norm.euclidean:
        w = E.norm._w(E.ambient_dim)
        qw, _ = np.linalg.qr(E.basis * w[:, None])
        V = qw / w[:, None]
        return V / E.norm(V.T)[None, :]
    if E.norm.polyhedral and k <= 3:
        cand = section_vertices(E)
    else:
        cand = sphere_points(E, samples, seed)[1]
    coords = cand @ q
    best, best_val = None, -1.0
    if len(cand) ** k <= 2_000_000:
        for idx in itertools.combinations(range(len(cand)), k):
            val = abs(np.linalg.det(coords[list(idx)]))
            if val > best_val:
                best, best_val = idx, val
    else:
        rng = np.random.default_rng(seed)
        for _ in range(20000):
            idx = rng.choice(len(cand), k, replace=False)
            val = abs(np.linalg.det(coords[idx]))
            if val > best_val:
                best, best_val = idx, val
    return cand[list(best)].T


@dataclass
class DetPropertiesReport:
    multiplicativity_lhs: float
    multiplicativity_rhs: float
    multiplicativity_residual: float
    multiplicativity_tolerance: float
    bound3_det: float
    bound3_rhs: float
    sandwich_ratio: float | None = None
    sandwich_upper_factor: float | None = None
    sandwich_lower_factor: float | None = None
    violations: list = None

    @property
    def ok(self) -> bool:
        return not self.violations


def det_properties_check(A, B, E: Subspace, method="auto", samples=200_000, seed=0,
                         split: tuple | None = None) -> DetPropertiesReport:
    """Multiplicativity, the unit-basis bound and (optionally) the splitting sandwich.

    ``split`` = (E1, E2) with E = E1 (+) E2 enables the sandwich quantities:
    the ratio det(A|E)/(det(A|E1) det(A|E2)) and the factors it must be
    compared with, |pi_{E1//E2}|^q and 1/|pi_{F1//F2}|^q.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    norm = E.norm
    violations = []
    F = E.image(A)
    dA, eA = det_on_subspace(A, E, method=method, samples=samples, seed=seed, return_error=True)
    dB, eB = det_on_subspace(B, F, method=method, samples=samples, seed=seed + 1, return_error=True)
    dBA, eBA = det_on_subspace(B @ A, E, method=method, samples=samples, seed=seed + 2, return_error=True)
    rhs = dA * dB
    resid = abs(dBA - rhs) / max(abs(rhs), 1e-300)
    if eA == 0 and eB == 0 and eBA == 0:
        tol = 1e-10
    else:
        comb = math.sqrt(eBA ** 2 + (dB * eA) ** 2 + (dA * eB) ** 2)
        tol = 3 * comb / max(abs(rhs), 1e-300)
    if resid > tol:
        violations.append(f"multiplicativity residual {resid:.3e} > {tol:.3e}")
    V = auerbach_basis(E)
    k = E.dim
    bound_rhs = k ** (k / 2) * float(np.prod(norm((A @ V).T)))
    if dA > bound_rhs * (1 + 1e-12) + 3 * eA:
        violations.append(f"unit-basis bound violated: det {dA:.6g} > {bound_rhs:.6g}")
    rep = DetPropertiesReport(dBA, rhs, resid, tol, dA, bound_rhs, violations=violations)
    if split is not None:
        E1, E2 = split
        q = E1.dim
        d1 = det_on_subspace(A, E1, method=method, samples=samples, seed=seed + 3)
        d2 = det_on_subspace(A, E2, method=method, samples=samples, seed=seed + 4)
        ratio = dA / (d1 * d2)
        pE = _restricted_projection_norm(E1, E2)
        pF = _restricted_projection_norm(E1.image(A), E2.image(A))
        rep.sandwich_ratio = ratio
        rep.sandwich_upper_factor = pE ** q
        rep.sandwich_lower_factor = 1.0 / pF ** q
    return rep


def _restricted_projection_norm(E1: Subspace, E2: Subspace) -> float:
    """Norm of the projection of E1 (+) E2 onto E1, restricted to E1 (+) E2."""
    B = np.hstack([E1.basis, E2.basis])
    k1 = E1.dim
    total = Subspace(B, E1.norm)
    sel = np.zeros((B.shape[1], B.shape[1]))
    sel[:k1, :k1] = np.eye(k1)
    # P acts on coordinates: v = B c  ->  B sel c
    Bp = np.linalg.pinv(B)
    P = B @ sel @ Bp
    return operator_norm_on_subspace(P, total)


def calibrate_splitting_constant(k: int, norm="l2", trials=2000, seed=0, method="auto"):
    """Empirical C_k for the splitting sandwich: the smallest constant seen to work.

    Returns (C_k, number of trials).  Random injective maps and splittings of
    random k-dimensional subspaces of R^{k+1}.
    """
    rng = np.random.default_rng(seed)
    norm = Norm.parse(norm)
    worst = 1.0
    d = k + 1
    for t in range(trials):
        B = rng.normal(size=(d, k))
        A = rng.normal(size=(d, d)) + 2 * np.eye(d)
        q = int(rng.integers(1, k)) if k > 1 else 1
        if k == 1:
            continue
        E = Subspace(B, norm)
        E1 = Subspace(B[:, :q], norm)
        E2 = Subspace(B[:, q:], norm)
        rep = det_properties_check(A, np.eye(d), E, method=method, split=(E1, E2), seed=t)
        up = rep.sandwich_ratio / rep.sandwich_upper_factor
        lo = rep.sandwich_lower_factor / rep.sandwich_ratio
        worst = max(worst, up, lo)
    return worst, trials


@dataclass
class ContinuityReport:
    log_ratios: list
    perturbations: list
    successive_ratios: list
    fitted_L: float
    precondition_ok: bool
    linear: bool


def det_continuity_modulus(A1, A2, E1: Subspace, E2: Subspace, M: float = 10.0, method="auto",
                           sweep=None, samples=4096) -> ContinuityReport:
    """|log det(A1|E1)/det(A2|E2)| against |A1-A2| + d_H(E1,E2) along a sweep.

    ``sweep`` scales the perturbation: (A1 + t (A2 - A1), E moving from E1
    toward E2 linearly in the basis); defaults to t in {1, 0.1, 0.01}.
    """
    A1 = np.asarray(A1, float)
    A2 = np.asarray(A2, float)
    norm = E1.norm
    ts = sweep if sweep is not None else (1.0, 0.1, 0.01)
    logs, perts = [], []
    pre_ok = True
    d1 = det_on_subspace(A1, E1, method=method)
    for t in ts:
        At = A1 + t * (A2 - A1)
        Et = Subspace(E1.basis + t * (E2.basis - E1.basis), norm)
        if norm.operator_norm(At) > M or norm.operator_norm(A1) > M:
            pre_ok = False
        dt = det_on_subspace(At, Et, method=method)
        logs.append(abs(math.log(d1 / dt)) if dt > 0 else float("inf"))
        dh = hausdorff_distance(E1, Et, samples=samples) if not E1.spans_equal(Et, 1e-15) else 0.0
        perts.append(norm.operator_norm(At - A1) + dh)
    ratios = [logs[i] / logs[i + 1] if logs[i + 1] > 0 else float("nan") for i in range(len(logs) - 1)]
    nz = [l / p for l, p in zip(logs, perts) if p > 0]
    L = max(nz) if nz else 0.0
    steps = [ts[i] / ts[i + 1] for i in range(len(ts) - 1)]
    linear = all(abs(r / s - 1) <= 0.2 for r, s in zip(ratios, steps) if math.isfinite(r)) if ratios else True
    return ContinuityReport(logs, perts, ratios, L, pre_ok, linear)


def norm_dependence_witness():
    """A pair (A, E) whose l1 and l2 determinants differ."""
    A = np.diag([2.0, 3.0])
    E = Subspace([[1.0], [1.0]])
    return det_on_subspace(A, E, "l1", "l1"), det_on_subspace(A, E, "l2", "l2")
