"""Random dynamical systems as skew products over a Bernoulli shift.

The driving sequence omega is a lazily sampled bi-infinite symbol sequence:
the symbol at index k is a pure function of (seed, k), and the shift theta
moves the offset by one.  Fiber maps act on R^d; coordinates listed as
periodic live on the circle R/Z and differences are taken modulo 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .norm_geometry import Norm

BLOCK = 4096
_MASK64 = (1 << 64) - 1


class DynamicsError(RuntimeError):
    pass


class DomainEscape(DynamicsError):
    def __init__(self, step, point):
        super().__init__(f"orbit left the declared domain at step {step}")
        self.step = step
        self.point = point


class NewtonFailure(DynamicsError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


class UnsupportedOperation(DynamicsError):
    pass


def _zigzag(b: int) -> int:
    return 2 * b if b >= 0 else -2 * b - 1


@lru_cache(maxsize=4096)
def _symbol_block(seed: int, cum: tuple, block: int) -> np.ndarray:
    if len(cum) == 1:
        out = np.zeros(BLOCK, dtype=np.int64)
    else:
        ss = np.random.SeedSequence([seed & _MASK64, _zigzag(block)])
        u = np.random.Generator(np.random.PCG64(ss)).random(BLOCK)
        out = np.searchsorted(np.asarray(cum[:-1]), u, side="right").astype(np.int64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DrivingSystem:
    alphabet_size: int
    symbol_probs: tuple
    seed: int = 0

    def __post_init__(self):
        p = tuple(float(x) for x in self.symbol_probs)
        if self.alphabet_size < 1 or len(p) != self.alphabet_size:
            raise ValueError("symbol_probs must have alphabet_size entries")
        if min(p) < 0 or abs(sum(p) - 1.0) > 1e-12:
            raise ValueError("symbol_probs must be a probability vector")
        object.__setattr__(self, "symbol_probs", p)
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    @property
    def _cum(self) -> tuple:
        return tuple(np.cumsum(self.symbol_probs).tolist())

    def with_seed(self, seed: int) -> "DrivingSystem":
        return DrivingSystem(self.alphabet_size, self.symbol_probs, seed)

    def symbols(self, start: int, n: int) -> np.ndarray:
        """Symbols at absolute indices start, ..., start + n - 1."""
        if n <= 0:
            return np.zeros(0, dtype=np.int64)
        b0, b1 = start // BLOCK, (start + n - 1) // BLOCK
        cum = self._cum
        parts = [_symbol_block(self.seed, cum, b) for b in range(b0, b1 + 1)]
        flat = np.concatenate(parts) if len(parts) > 1 else parts[0]
        off = start - b0 * BLOCK
        return flat[off:off + n]

    def point(self, offset: int = 0) -> "BasePoint":
        return BasePoint(self, offset)


@dataclass(frozen=True)
class BasePoint:
    """omega: the driving sequence seen from position ``offset``."""

    driving: DrivingSystem
    offset: int = 0

    @property
    def seed(self) -> int:
        return self.driving.seed

    def symbol(self, k: int = 0) -> int:
        return int(self.driving.symbols(self.offset + k, 1)[0])

    def window(self, start: int, n: int) -> np.ndarray:
        """Symbols omega_{start}, ..., omega_{start+n-1} relative to this point."""
        return self.driving.symbols(self.offset + start, n)

    def shift(self, m: int = 1) -> "BasePoint":
        return BasePoint(self.driving, self.offset + m)


@dataclass(frozen=True)
class FiberMap:
    """One injective C^2 fiber map.

    ``evaluate`` and ``jacobian`` are vectorised over leading axes:
    evaluate maps (..., d) -> (..., d) and jacobian maps (..., d) -> (..., d, d).
    """

    dimension: int
    evaluate: Callable
    jacobian: Callable
    c2_bound: float = 0.0
    domain_radius: float = np.inf
    constant_jacobian: np.ndarray | None = None


@dataclass(frozen=True)
class RandomSystem:
    name: str
    driving: DrivingSystem
    maps: tuple
    ambient_norm: Norm = field(default_factory=Norm)
    periodic: tuple = ()
    domain_center: tuple | None = None
    tail_block: tuple | None = None
    initial_state: tuple | None = None
    fixed_point: tuple | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {m.dimension for m in self.maps}
        if len(dims) != 1:
            raise ValueError("all fiber maps must share one dimension")
        if len(self.maps) != self.driving.alphabet_size:
            raise ValueError("one fiber map per driving symbol is required")
        object.__setattr__(self, "ambient_norm", Norm.parse(self.ambient_norm))

    @property
    def dim(self) -> int:
        return self.maps[0].dimension

    @property
    def linear_cocycle(self) -> bool:
        return all(m.constant_jacobian is not None for m in self.maps)

    def with_seed(self, seed: int) -> "RandomSystem":
        from dataclasses import replace
        return replace(self, driving=self.driving.with_seed(seed))

    def with_norm(self, norm) -> "RandomSystem":
        from dataclasses import replace
        return replace(self, ambient_norm=Norm.parse(norm))

    def base(self, offset: int = 0) -> BasePoint:
        return self.driving.point(offset)

    # coordinates -----------------------------------------------------
    def wrap(self, x):
        x = np.array(x, dtype=float)
        if self.periodic:
            idx = list(self.periodic)
            x[..., idx] = np.mod(x[..., idx], 1.0)
        return x

    def difference(self, a, b):
        """a - b with periodic coordinates reduced to [-1/2, 1/2)."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.periodic:
            idx = list(self.periodic)
            d[..., idx] -= np.floor(d[..., idx] + 0.5)
        return d

    def difference_near(self, a, b, guess):
        """a - b with periodic coordinates taken nearest to ``guess``."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.periodic:
            idx = list(self.periodic)
            g = np.asarray(guess, dtype=float)
            d[..., idx] -= np.floor(d[..., idx] - g[..., idx] + 0.5)
        return d

    def in_domain(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        free = [i for i in range(self.dim) if i not in self.periodic]
        if not free or self.maps[0].domain_radius == np.inf:
            return np.isfinite(x).all(axis=-1)
        c = np.zeros(len(free)) if self.domain_center is None else np.asarray(self.domain_center)[free]
        r = min(m.domain_radius for m in self.maps)
        return np.isfinite(x).all(axis=-1) & (np.linalg.norm(x[..., free] - c, axis=-1) <= r)

    # one step ---------------------------------------------------------
    def step(self, symbol: int, x):
        return self.maps[symbol].evaluate(np.asarray(x, dtype=float))

    def jac(self, symbol: int, x):
        m = self.maps[symbol]
        if m.constant_jacobian is not None:
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(m.constant_jacobian, x.shape[:-1] + m.constant_jacobian.shape).copy()
        return m.jacobian(np.asarray(x, dtype=float))

    def step_symbols(self, symbols, X):
        """Apply f_{s_i} to X[i] for a vector of symbols."""
        X = np.asarray(X, dtype=float)
        symbols = np.asarray(symbols)
        if len(self.maps) == 1:
            return self.maps[0].evaluate(X)
        out = np.empty_like(X)
        for s in np.unique(symbols):
            sel = symbols == s
            out[sel] = self.maps[int(s)].evaluate(X[sel])
        return out

    def jac_symbols(self, symbols, X):
        X = np.asarray(X, dtype=float)
        symbols = np.asarray(symbols)
        if len(self.maps) == 1:
            return self.jac(0, X)
        out = np.empty(X.shape + (X.shape[-1],))
        for s in np.unique(symbols):
            sel = symbols == s
            out[sel] = self.jac(int(s), X[sel])
        return out


@dataclass
class Trajectory:
    base: BasePoint
    points: np.ndarray
    symbols: np.ndarray
    jacobians: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.points) - 1

    @property
    def end(self):
        return self.points[-1]


def compose_forward(system: RandomSystem, omega: BasePoint, x, n: int, with_jacobians=False,
                    check_domain=True) -> Trajectory:
    """The orbit x, f_omega(x), ..., f^n_omega(x)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    x = system.wrap(np.asarray(x, dtype=float))
    syms = omega.window(0, n)
    pts = np.empty((n + 1, system.dim))
    pts[0] = x
    if check_domain and not system.in_domain(x):
        raise DomainEscape(0, x)
    jacs = np.empty((n, system.dim, system.dim)) if with_jacobians else None
    for k in range(n):
        s = int(syms[k])
        if with_jacobians:
            jacs[k] = system.jac(s, pts[k])
        pts[k + 1] = system.step(s, pts[k])
        if check_domain and not system.in_domain(pts[k + 1]):
            raise DomainEscape(k + 1, pts[k + 1])
    return Trajectory(omega, pts, syms, jacs)


def forward_many(system: RandomSystem, omegas: Sequence[BasePoint], X, n: int, record=False,
                 check_domain=True):
    """Advance many (omega_i, x_i) pairs n steps; optionally record every state."""
    X = system.wrap(np.array(X, dtype=float))
    syms = np.stack([w.window(0, n) for w in omegas]) if n else np.zeros((len(X), 0), int)
    hist = np.empty((n + 1,) + X.shape) if record else None
    if record:
        hist[0] = X
    for k in range(n):
        X = system.step_symbols(syms[:, k], X)
        if check_domain:
            bad = ~system.in_domain(X)
            if bad.any():
                raise DomainEscape(k + 1, X[np.argmax(bad)])
        if record:
            hist[k + 1] = X
    return (X, hist) if record else X


def derivative_cocycle(system: RandomSystem, omega: BasePoint, x, n: int, traj: Trajectory | None = None):
    """Df^n_omega(x) = Df(x_{n-1}) ... Df(x_0)."""
    if traj is None:
        traj = compose_forward(system, omega, x, n, with_jacobians=True)
    jacs = traj.jacobians if traj.jacobians is not None else orbit_jacobians(system, traj)
    D = np.eye(system.dim)
    for J in jacs[:n]:
        D = J @ D
    return D


def orbit_jacobians(system: RandomSystem, traj: Trajectory) -> np.ndarray:
    syms = traj.symbols
    return system.jac_symbols(syms, traj.points[:len(syms)])


def symbol_jacobians(system: RandomSystem, omega: BasePoint, start: int, n: int) -> np.ndarray:
    """Jacobians of a linear cocycle at steps start..start+n-1, without an orbit."""
    if not system.linear_cocycle:
        raise UnsupportedOperation("symbol-only Jacobians need a linear cocycle")
    table = np.stack([m.constant_jacobian for m in system.maps])
    return table[omega.window(start, n)]


def _newton_step_inverse(system, symbol, y, seed, tol, max_iter, damping_floor=1e-3):
    """Solve f_symbol(z) = y by damped Newton from ``seed`` (vectorised)."""
    z = np.array(seed, dtype=float)
    y = np.asarray(y, dtype=float)
    for it in range(max_iter):
        fz = system.step_symbols(np.full(len(z), symbol), z) if z.ndim == 2 else system.step(symbol, z)
        r = system.difference(fz, y)
        res = np.abs(r).max(axis=-1)
        if np.all(res <= tol):
            return system.wrap(z), res
        J = system.jac(symbol, z)
        dz = -np.linalg.solve(J, r[..., None])[..., 0]
        t = np.ones(res.shape)
        for _ in range(30):
            zt = z + t[..., None] * dz
            rt = system.difference(system.step(symbol, zt), y)
            newres = np.abs(rt).max(axis=-1)
            worse = newres > res * (1 - 1e-4 * t) + tol
            if not np.any(worse) or np.all(t <= damping_floor):
                break
            t = np.where(worse, np.maximum(t * 0.5, damping_floor), t)
        z = np.where((res <= tol)[..., None], z, z + t[..., None] * dz)
    fz = system.step(symbol, z)
    res = np.abs(system.difference(fz, y)).max(axis=-1)
    return system.wrap(z), res


def compose_backward(system: RandomSystem, omega: BasePoint, y, n: int, seeds=None,
                     tol: float = 1e-12, max_iter: int = 50, final_tol: float = 1e-10):
    """z with f^n_{theta^{-n} omega}(z) = y, one damped Newton solve per step.

    ``seeds`` is a stored orbit (seeds[j] approximates the j-th preimage,
    seeds[0] ~ y); without it each step seeds from the previous preimage.
    Returns the list of preimages y_{-1}, ..., y_{-n} as an (n+1, d) array
    whose row j is the j-th preimage.
    """
    y = system.wrap(np.asarray(y, dtype=float))
    out = np.empty((n + 1,) + y.shape)
    out[0] = y
    syms = omega.window(-n, n)[::-1]  # syms[j] drives the step from -(j+1) to -j
    cur = y
    for j in range(n):
        s = int(syms[j])
        if seeds is not None:
            guess = np.asarray(seeds[j + 1], dtype=float)
            # first-order correction of the stored preimage toward the current target
            J = system.jac(s, guess)
            off = system.difference(cur, system.step(s, guess))
            guess = guess + np.linalg.solve(J, off[..., None])[..., 0]
        else:
            guess = cur
        z, res = _newton_step_inverse(system, s, cur, guess, tol, max_iter)
        if np.any(res > final_tol):
            raise NewtonFailure(f"backward step {j + 1} did not converge", float(np.max(res)))
        out[j + 1] = z
        cur = z
    return out


def estimate_tail_contraction(system: RandomSystem, omega: BasePoint, x, n: int,
                              traj: Trajectory | None = None) -> float:
    """(1/n) log of the operator norm of the cocycle compressed to the tail block."""
    if system.tail_block is None:
        raise UnsupportedOperation(f"{system.name} declares no tail block")
    lo, hi = system.tail_block
    if system.linear_cocycle:
        jacs = symbol_jacobians(system, omega, 0, n)
    else:
        if traj is None:
            traj = compose_forward(system, omega, x, n, with_jacobians=True)
        jacs = traj.jacobians
    T = np.eye(hi - lo)
    logscale = 0.0
    for J in jacs[:n]:
        T = J[lo:hi, lo:hi] @ T
        s = np.abs(T).max()
        if s > 0:
            T /= s
            logscale += np.log(s)
    tail_norm = Norm.parse(system.ambient_norm)
    if tail_norm.kind == "weighted":
        tail_norm = Norm("weighted", tail_norm.weights[lo:hi])
    return (logscale + np.log(tail_norm.operator_norm(T))) / n


def finite_difference_cocycle(system: RandomSystem, omega: BasePoint, x, n: int, h: float = 1e-6):
    """Central finite difference of x -> f^n_omega(x)."""
    x = np.asarray(x, dtype=float)
    d = system.dim
    X = np.concatenate([x + h * np.eye(d), x - h * np.eye(d)])
    Y = forward_many(system, [omega] * (2 * d), X, n, check_domain=False)
    return system.difference(Y[:d], Y[d:]).T / (2 * h)


def burn_in(system: RandomSystem, omega: BasePoint, x, n_burn: int):
    """Advance to the (numerical) attractor; returns (theta^{n_burn} omega, state)."""
    X = forward_many(system, [omega], np.asarray(x, dtype=float)[None], n_burn)
    return omega.shift(n_burn), X[0]


@dataclass
class OrbitWindow:
    """A stored two-sided orbit segment around a base point.

    ``points[j + back]`` is Phi^j(omega, x) for -back <= j <= fwd and
    ``symbols[j + back]`` drives the step from index j to j + 1.
    """

    base: BasePoint
    points: np.ndarray
    symbols: np.ndarray
    back: int

    @property
    def fwd(self) -> int:
        return len(self.points) - 1 - self.back

    def at(self, j: int):
        return self.points[j + self.back]

    def symbol(self, j: int) -> int:
        return int(self.symbols[j + self.back])

    def shifted(self, m: int) -> "OrbitWindow":
        return OrbitWindow(self.base.shift(m), self.points, self.symbols, self.back + m)


def orbit_window(system: RandomSystem, omega: BasePoint, x0, back: int, fwd: int, n_burn: int = 1000) -> OrbitWindow:
    """Burn in from x0 at theta^{-back-n_burn} omega so the orbit passes through omega at index 0.

    The backward part is the stored forward orbit, so no inversion is needed.
    """
    start = omega.shift(-back - n_burn)
    X = forward_many(system, [start], np.asarray(x0, dtype=float)[None], n_burn)[0]
    traj = compose_forward(system, omega.shift(-back), X, back + fwd)
    return OrbitWindow(omega, traj.points, omega.window(-back, back + fwd), back)
