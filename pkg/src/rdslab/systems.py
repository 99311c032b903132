"""Built-in model systems and coefficient-table custom systems.

Circle coordinates driven by integer matrices are iterated on the 2^-53
grid with exact integer arithmetic.  Plain floating point collapses
angle-doubling orbits to 0 after about 53 steps; on the grid an odd
determinant is a bijection, and for even multipliers a one-bit dither
derived from the point itself keeps the low bits alive.  The dither moves
a point by at most 2^-53 and is a pure function of the point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .norm_geometry import Norm
from .rds_core import DrivingSystem, FiberMap, RandomSystem

GRID_BITS = 53
_GRID = float(1 << GRID_BITS)
_GRID_MASK = np.uint64((1 << GRID_BITS) - 1)
_HASH = np.uint64(0x9E3779B97F4A7C15)
TWO_PI = 2.0 * np.pi


def to_grid(theta) -> np.ndarray:
    t = np.mod(np.asarray(theta, dtype=float), 1.0)
    return np.floor(t * _GRID).astype(np.uint64) & _GRID_MASK


def from_grid(m) -> np.ndarray:
    return np.asarray(m, dtype=np.uint64).astype(float) / _GRID


def _dither(m: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return (m * _HASH) >> np.uint64(63)


def integer_torus_map(M, angles) -> np.ndarray:
    """x -> M x mod 1 on the 2^-53 grid.  ``angles`` has shape (..., k)."""
    M = np.asarray(M, dtype=np.int64)
    if np.any(M < 0):
        raise ValueError("integer torus maps need nonnegative entries")
    m = to_grid(angles)
    det = int(round(np.linalg.det(M))) if M.shape[0] > 1 else int(M[0, 0])
    with np.errstate(over="ignore"):
        out = np.zeros_like(m)
        for i in range(M.shape[0]):
            acc = np.zeros(m.shape[:-1], dtype=np.uint64)
            for j in range(M.shape[1]):
                if M[i, j]:
                    acc = acc + np.uint64(M[i, j]) * m[..., j]
            if det % 2 == 0:
                acc = acc + _dither(m[..., i])
            out[..., i] = acc & _GRID_MASK
    return from_grid(out)


def _const_map(M, evaluate, domain_radius=np.inf, c2_bound=0.0) -> FiberMap:
    M = np.asarray(M, dtype=float)
    M.setflags(write=False)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(M, x.shape[:-1] + M.shape).copy()

    return FiberMap(M.shape[0], evaluate, jacobian, c2_bound, domain_radius, M)


# individual systems ----------------------------------------------------------

def diag_cocycle(seed=0, factors=((3.0, 1.0 / 3.0), (2.0, 0.25)), probs=None, norm="l2"):
    mats = [np.diag(np.asarray(f, dtype=float)) for f in factors]
    maps = tuple(_const_map(D, (lambda D: lambda x: np.asarray(x, float) @ D.T)(D)) for D in mats)
    k = len(maps)
    probs = tuple(probs) if probs is not None else (1.0 / k,) * k
    d = mats[0].shape[0]
    return RandomSystem("diag_cocycle", DrivingSystem(k, probs, seed), maps, Norm.parse(norm),
                        initial_state=(0.0,) * d, fixed_point=(0.0,) * d,
                        params={"factors": [list(map(float, f)) for f in factors]})


def cat_map(seed=0, matrix=((2, 1), (1, 1)), norm="l2"):
    M = np.asarray(matrix, dtype=np.int64)
    fm = _const_map(M, lambda x: integer_torus_map(M, x))
    return RandomSystem("cat_map", DrivingSystem(1, (1.0,), seed), (fm,), Norm.parse(norm),
                        periodic=(0, 1), initial_state=(0.1234567, 0.7654321),
                        fixed_point=(0.0, 0.0), params={"matrix": M.tolist()})


def _sheared_torus(M, kappa) -> FiberMap:
    M = np.asarray(M, dtype=float)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        y = x[..., 1] + kappa * np.sin(TWO_PI * x[..., 0]) / TWO_PI
        out = np.stack([M[0, 0] * x[..., 0] + M[0, 1] * y, M[1, 0] * x[..., 0] + M[1, 1] * y], axis=-1)
        return np.mod(out, 1.0)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        shear = np.zeros(x.shape[:-1] + (2, 2))
        shear[..., 0, 0] = 1.0
        shear[..., 1, 1] = 1.0
        shear[..., 1, 0] = kappa * np.cos(TWO_PI * x[..., 0])
        return M @ shear

    c2 = np.abs(M).sum(axis=0).max() * kappa * TWO_PI
    return FiberMap(2, evaluate, jacobian, float(c2))


def random_torus_hyperbolic(seed=0, kappa=0.05, matrices=(((2, 1), (1, 1)), ((3, 1), (2, 1))), norm="l2"):
    maps = tuple(_sheared_torus(M, kappa) for M in matrices)
    k = len(maps)
    return RandomSystem("random_torus_hyperbolic", DrivingSystem(k, (1.0 / k,) * k, seed), maps,
                        Norm.parse(norm), periodic=(0, 1), initial_state=(0.1234567, 0.7654321),
                        fixed_point=(0.0, 0.0),
                        params={"kappa": kappa, "matrices": [np.asarray(M).tolist() for M in matrices]})


def _solenoid_map(multiplier, contraction, amplitude=0.5, wobble=0.0) -> FiberMap:
    """(t, u, v) -> (k t [+ wobble], c u + a cos 2 pi t, c v + a sin 2 pi t)."""

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        t = x[..., 0]
        if wobble:
            tn = np.mod(multiplier * t + wobble * np.sin(TWO_PI * t) / TWO_PI, 1.0)
        else:
            tn = integer_torus_map([[multiplier]], t[..., None])[..., 0]
        return np.stack([tn,
                         contraction * x[..., 1] + amplitude * np.cos(TWO_PI * t),
                         contraction * x[..., 2] + amplitude * np.sin(TWO_PI * t)], axis=-1)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        t = x[..., 0]
        J = np.zeros(x.shape[:-1] + (3, 3))
        J[..., 0, 0] = multiplier + wobble * np.cos(TWO_PI * t)
        J[..., 1, 0] = -TWO_PI * amplitude * np.sin(TWO_PI * t)
        J[..., 2, 0] = TWO_PI * amplitude * np.cos(TWO_PI * t)
        J[..., 1, 1] = contraction
        J[..., 2, 2] = contraction
        return J

    c2 = TWO_PI ** 2 * amplitude + TWO_PI * abs(wobble)
    return FiberMap(3, evaluate, jacobian, float(c2), domain_radius=10.0)


def solenoid(seed=0, contraction=0.1, norm="l2"):
    fp = (0.0, 0.5 / (1.0 - contraction), 0.0)
    return RandomSystem("solenoid", DrivingSystem(1, (1.0,), seed), (_solenoid_map(2, contraction),),
                        Norm.parse(norm), periodic=(0,), domain_center=(0.0, 0.0, 0.0),
                        initial_state=(0.1234567, 0.0, 0.0), fixed_point=fp,
                        params={"contraction": contraction})


def solenoid_varexp(seed=0, wobble=0.1, contraction=0.1, norm="l2"):
    fp = (0.0, 0.5 / (1.0 - contraction), 0.0)
    return RandomSystem("solenoid_varexp", DrivingSystem(1, (1.0,), seed),
                        (_solenoid_map(2, contraction, wobble=wobble),), Norm.parse(norm),
                        periodic=(0,), domain_center=(0.0, 0.0, 0.0),
                        initial_state=(0.1234567, 0.0, 0.0), fixed_point=fp,
                        params={"wobble": wobble, "contraction": contraction})


def random_solenoid(seed=0, multipliers=(2, 3), contractions=(0.1, 0.15), norm="l2"):
    maps = tuple(_solenoid_map(k, c) for k, c in zip(multipliers, contractions))
    n = len(maps)
    return RandomSystem("random_solenoid", DrivingSystem(n, (1.0 / n,) * n, seed), maps,
                        Norm.parse(norm), periodic=(0,), domain_center=(0.0, 0.0, 0.0),
                        initial_state=(0.1234567, 0.0, 0.0),
                        params={"multipliers": list(multipliers), "contractions": list(contractions)})


def _tail_map(M, tau, decay, coupling, tail_dim) -> FiberMap:
    M = np.asarray(M, dtype=np.int64)
    scale = tau * decay ** np.arange(tail_dim)
    phase = np.arange(1, tail_dim + 1)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        ang = x[..., :2]
        arg = TWO_PI * (ang[..., 0:1] + phase * ang[..., 1:2])
        forcing = coupling * np.where(phase % 2 == 1, np.cos(arg), np.sin(arg))
        tail = scale * x[..., 2:] + forcing
        return np.concatenate([integer_torus_map(M, ang), tail], axis=-1)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        d = 2 + tail_dim
        J = np.zeros(x.shape[:-1] + (d, d))
        J[..., 0:2, 0:2] = M
        arg = TWO_PI * (x[..., 0:1] + phase * x[..., 1:2])
        dforce = coupling * TWO_PI * np.where(phase % 2 == 1, -np.sin(arg), np.cos(arg))
        J[..., 2:, 0] = dforce
        J[..., 2:, 1] = dforce * phase
        idx = np.arange(2, d)
        J[..., idx, idx] = scale
        return J

    c2 = coupling * TWO_PI ** 2 * (1 + tail_dim) ** 2
    return FiberMap(2 + tail_dim, evaluate, jacobian, float(c2), domain_radius=10.0)


def tail_banach(seed=0, taus=(0.05, 0.15), decay=0.5, coupling=0.1, tail_dim=6,
                matrix=((3, 1), (1, 2)), norm="l1"):
    maps = tuple(_tail_map(matrix, t, decay, coupling, tail_dim) for t in taus)
    n = len(maps)
    d = 2 + tail_dim
    return RandomSystem("tail_banach", DrivingSystem(n, (1.0 / n,) * n, seed), maps, Norm.parse(norm),
                        periodic=(0, 1), domain_center=(0.0,) * d, tail_block=(2, d),
                        initial_state=(0.1234567, 0.7654321) + (0.0,) * tail_dim,
                        params={"taus": list(taus), "decay": decay, "coupling": coupling,
                                "matrix": np.asarray(matrix).tolist()})


def quadratic_model(seed=0, expansion=2.0, contraction=0.5, norm="l2"):
    """f(u, s) = (a u, b s + u^2), unstable manifold s = u^2 / (a^2 - b)."""

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        return np.stack([expansion * x[..., 0], contraction * x[..., 1] + x[..., 0] ** 2], axis=-1)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = expansion
        J[..., 1, 0] = 2 * x[..., 0]
        J[..., 1, 1] = contraction
        return J

    fm = FiberMap(2, evaluate, jacobian, 2.0, domain_radius=10.0)
    return RandomSystem("quadratic_model", DrivingSystem(1, (1.0,), seed), (fm,), Norm.parse(norm),
                        domain_center=(0.0, 0.0), initial_state=(0.0, 0.0), fixed_point=(0.0, 0.0),
                        params={"expansion": expansion, "contraction": contraction})


# coefficient tables ------------------------------------------------------------

@dataclass(frozen=True)
class Term:
    """coef * prod x_i^p_i * trig(2 pi <freq, x>), trig in {1, cos, sin}."""

    coef: float
    powers: tuple
    trig: str = "none"
    freq: tuple = ()

    @classmethod
    def parse(cls, spec, d):
        powers = tuple(int(p) for p in spec.get("powers", [0] * d))
        freq = tuple(float(f) for f in spec.get("freq", [0] * d))
        trig = spec.get("trig", "none")
        if len(powers) != d or len(freq) != d:
            raise ValueError("term powers/freq must have one entry per coordinate")
        if trig not in ("none", "cos", "sin") or min(powers) < 0:
            raise ValueError(f"bad term {spec}")
        return cls(float(spec["coef"]), powers, trig, freq)

    def _mono(self, x, skip=None):
        out = np.ones(x.shape[:-1])
        for i, p in enumerate(self.powers):
            if i == skip:
                out = out * (p * x[..., i] ** (p - 1) if p else 0.0)
            elif p:
                out = out * x[..., i] ** p
        return out

    def _arg(self, x):
        return TWO_PI * (x @ np.asarray(self.freq))

    def value(self, x):
        mono = self._mono(x)
        if self.trig == "none":
            return self.coef * mono
        f = np.cos if self.trig == "cos" else np.sin
        return self.coef * mono * f(self._arg(x))

    def gradient(self, x):
        d = x.shape[-1]
        mono = self._mono(x)
        grads = np.stack([self._mono(x, skip=i) for i in range(d)], axis=-1)
        if self.trig == "none":
            return self.coef * grads
        arg = self._arg(x)
        if self.trig == "cos":
            t, dt = np.cos(arg), -np.sin(arg)
        else:
            t, dt = np.sin(arg), np.cos(arg)
        return self.coef * (grads * t[..., None] + (mono * dt)[..., None] * TWO_PI * np.asarray(self.freq))


def table_map(rows, periodic=(), domain_radius=np.inf) -> FiberMap:
    """Fiber map from rows[i] = list of term dicts for output coordinate i."""
    d = len(rows)
    table = [[Term.parse(t, d) for t in row] for row in rows]
    per = list(periodic)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        out = np.stack([sum((t.value(x) for t in row), np.zeros(x.shape[:-1])) for row in table], axis=-1)
        if per:
            out[..., per] = np.mod(out[..., per], 1.0)
        return out

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        return np.stack([sum((t.gradient(x) for t in row), np.zeros(x.shape)) for row in table], axis=-2)

    constant = all(t.trig == "none" and sum(t.powers) <= 1 for row in table for t in row)
    M = jacobian(np.zeros(d)) if constant else None
    return FiberMap(d, evaluate, jacobian, 0.0, domain_radius, M)


def custom_system(spec: dict, seed=0) -> RandomSystem:
    maps_spec = spec["maps"]
    periodic = tuple(spec.get("periodic", ()))
    radius = float(spec.get("domain_radius", np.inf))
    maps = tuple(table_map(m, periodic, radius) for m in maps_spec)
    k = len(maps)
    probs = tuple(spec.get("symbol_probs", [1.0 / k] * k))
    d = maps[0].dimension
    tail = spec.get("tail_block")
    return RandomSystem(spec.get("name", "custom"), DrivingSystem(k, probs, seed), maps,
                        Norm.parse(spec.get("norm", "l2")), periodic=periodic,
                        domain_center=(0.0,) * d if radius < np.inf else None,
                        tail_block=tuple(tail) if tail else None,
                        initial_state=tuple(spec.get("initial_state", [0.0] * d)),
                        fixed_point=tuple(spec["fixed_point"]) if "fixed_point" in spec else None,
                        params={"custom": True})


BUILTINS = {
    "diag_cocycle": diag_cocycle,
    "cat_map": cat_map,
    "random_torus_hyperbolic": random_torus_hyperbolic,
    "solenoid": solenoid,
    "random_solenoid": random_solenoid,
    "tail_banach": tail_banach,
    "solenoid_varexp": solenoid_varexp,
    "quadratic_model": quadratic_model,
}

# systems with a uniformly hyperbolic attractor, used for the all-systems checks
HYPERBOLIC = ("diag_cocycle", "cat_map", "random_torus_hyperbolic", "solenoid",
              "random_solenoid", "tail_banach", "solenoid_varexp")


def build_system(name: str, seed: int = 0, norm=None, **params) -> RandomSystem:
    if name not in BUILTINS:
        raise KeyError(f"unknown system {name!r}; choose from {sorted(BUILTINS)}")
    if norm is not None:
        params["norm"] = norm
    return BUILTINS[name](seed=seed, **params)


def sum_positive_exponents(system: RandomSystem) -> float | None:
    """Closed-form sum of positive exponents where one is available."""
    p = system.params
    probs = np.asarray(system.driving.symbol_probs)
    if system.name == "diag_cocycle":
        logs = np.log(np.abs(np.asarray(p["factors"])))
        lam = probs @ logs
        return float(lam[lam > 0].sum())
    if system.name in ("cat_map",):
        ev = np.abs(np.linalg.eigvals(np.asarray(p["matrix"], float)))
        return float(np.log(ev[ev > 1]).sum())
    if system.name == "solenoid":
        return float(np.log(2.0))
    if system.name == "random_solenoid":
        return float(probs @ np.log(p["multipliers"]))
    if system.name == "tail_banach":
        return float(np.log(abs(np.linalg.det(np.asarray(p["matrix"], float)))))
    if system.name == "quadratic_model":
        return float(np.log(p["expansion"]))
    return None
