"""Discrete potential theory for the simple random walk on Z^d.

The free Green function is evaluated from its modified-Bessel integral
representation

    G(x) = int_0^inf  prod_i exp(-t/d) I_{x_i}(t/d)  dt,

integrated with the trapezoid rule in ``log t`` plus an asymptotic tail.  The
integrable behaviour at large ``t`` is what produces the ``|x|^{2-d}`` decay,
so no subtraction is needed.  Killed Green functions and Dirichlet problems
on finite domains are solved with a sparse LU factorisation.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg as sla
from scipy import sparse
from scipy.sparse import linalg as spla
from scipy.special import ive

from . import _kernels
from .geometry import FiniteSet, boundary, neighbor_offsets, outer_boundary


class AccuracyError(RuntimeError):
    """A numerical routine could not reach the requested accuracy."""


class OracleError(RuntimeError):
    """Two quantities that must agree by an identity disagree."""


class CapacityInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# free Green function


class GreenTable:
    """Memoised free lattice Green function ``G(0, x)``.

    Values are stored in a dense table over sorted absolute offsets and grow
    on demand.  ``accuracy`` is the largest change seen when halving the
    quadrature step on the computed entries.
    """

    def __init__(self, d: int = 3, tol: float = 1e-8, step: float = 0.05,
                 log_lo: float = -36.0, log_hi: float = 20.0):
        if d < 3:
            raise ValueError("the walk is recurrent for d < 3")
        self.d = d
        self.tol = tol
        self.step = step
        self.log_lo = log_lo
        self.log_hi = log_hi
        n_nodes = 2 * int(round((log_hi - log_lo) / (2 * step))) + 1
        self._sig = log_hi - step * np.arange(n_nodes)[::-1]
        self._t = np.exp(self._sig)
        self._w = self._weights(step, 1)
        self._T = math.exp(log_hi)
        self._bessel = np.zeros((0, len(self._t)))
        self._table = np.zeros((0,) * d)
        self._M = -1
        self.accuracy = 0.0
        self._lock = threading.Lock()

    def _weights(self, h: float, stride: int) -> np.ndarray:
        # trapezoid weights on every stride-th node, with the Euler-Maclaurin
        # end correction at the upper cut where the integrand ~ t^(1-d/2)
        w = np.zeros_like(self._t)
        idx = np.arange(0, len(self._t), stride)
        w[idx] = h
        w[idx[0]] = w[idx[-1]] = h / 2
        w[idx[-1]] -= h * h / 12 * (1 - self.d / 2)
        return w * self._t

    def _bessel_rows(self, n_max: int, t: np.ndarray) -> np.ndarray:
        n = np.arange(n_max + 1)[:, None]
        return ive(n, t[None, :] / self.d)

    def _integrate(self, keys: np.ndarray, rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
        out = np.empty(len(keys))
        for a in range(0, len(keys), 2048):
            k = keys[a:a + 2048]
            prod = rows[k[:, 0]].copy()
            for i in range(1, self.d):
                prod *= rows[k[:, i]]
            out[a:a + 2048] = prod @ weights
        return out + self._tail(keys)

    def _tail(self, keys: np.ndarray) -> np.ndarray:
        # beyond T: ive(n, z) = (2 pi z)^(-1/2) (1 - (4n^2 - 1)/(8z) + O(z^-2))
        d, T = self.d, self._T
        c = (d / (2 * math.pi)) ** (d / 2)
        a = d * (4.0 * (keys.astype(float) ** 2) - 1.0).sum(axis=1) / 8.0
        return c * (T ** (1 - d / 2) / (d / 2 - 1) - a * T ** (-d / 2) / (d / 2))

    def _grow(self, M: int):
        M = max(M, 2 * self._M + 2, 8)
        rows = self._bessel_rows(M, self._t)
        grids = np.meshgrid(*([np.arange(M + 1)] * self.d), indexing="ij")
        allk = np.stack(grids, -1).reshape(-1, self.d)
        srt = np.sort(allk, axis=1)
        keys, inv = np.unique(srt, axis=0, return_inverse=True)
        vals = self._integrate(keys, rows, self._w)
        # accuracy estimate from the step-doubled rule on a sample of keys
        sub = keys[:: max(1, len(keys) // 64)]
        coarse = self._integrate(sub, rows, self._weights(2 * self.step, 2))
        fine = self._integrate(sub, rows, self._w)
        acc = float(np.abs(coarse - fine).max())
        if acc > self.tol:
            raise AccuracyError(f"Green quadrature accuracy {acc:.2e} exceeds {self.tol:.2e}")
        self.accuracy = max(self.accuracy, acc)
        self._table = vals[inv.ravel()].reshape((M + 1,) * self.d)
        self._bessel = rows
        self._M = M

    def values(self, offsets) -> np.ndarray:
        """Vectorised ``G(0, x)`` for an ``(n, d)`` array of offsets."""
        off = np.abs(np.asarray(offsets, dtype=np.int64))
        if off.ndim == 1:
            off = off[None, :]
        if off.shape[1] != self.d:
            raise ValueError(f"offset dimension {off.shape[1]} != {self.d}")
        if off.size == 0:
            return np.zeros(len(off))
        m = int(off.max())
        if m > self._M:
            with self._lock:
                if m > self._M:
                    self._grow(m)
        return self._table[tuple(off.T)]

    def __call__(self, offset: Sequence[int]) -> float:
        return float(self.values(np.asarray(offset)[None, :])[0])

    def matrix(self, P, Q=None) -> np.ndarray:
        """Dense matrix ``G(p_i, q_j)``."""
        P = np.asarray(P, dtype=np.int64)
        Q = P if Q is None else np.asarray(Q, dtype=np.int64)
        if len(P) == 0 or len(Q) == 0:
            return np.zeros((len(P), len(Q)))
        out = np.empty((len(P), len(Q)))
        step = max(1, 4_000_000 // max(1, len(Q)))
        for a in range(0, len(P), step):
            diff = P[a:a + step, None, :] - Q[None, :, :]
            out[a:a + step] = self.values(diff.reshape(-1, self.d)).reshape(-1, len(Q))
        return out

    def harmonicity_residual(self, x: Sequence[int]) -> float:
        """``G(x) - delta_{x0} - mean of G over neighbours``."""
        x = np.asarray(x, dtype=np.int64)
        nb = x[None, :] + neighbor_offsets(self.d)
        delta = 1.0 if not x.any() else 0.0
        return float(self(x) - delta - self.values(nb).mean())


_TABLES: dict = {}


def green_table(d: int = 3) -> GreenTable:
    """Process-wide shared table for dimension ``d``."""
    if d not in _TABLES:
        _TABLES[d] = GreenTable(d)
    return _TABLES[d]


def free_green(offset: Sequence[int], d: int | None = None) -> float:
    d = len(offset) if d is None else d
    return green_table(d)(offset)


def continuum_green(dist, d: int = 3):
    """Leading asymptotic ``G(x) ~ c_d |x|^{2-d}`` of the lattice Green function."""
    c = d * math.gamma(d / 2 - 1) / (2 * math.pi ** (d / 2))
    return c * np.asarray(dist, dtype=float) ** (2 - d)


def green_mc(offsets, n_walks: int, radius: float, rng: np.random.Generator,
             d: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo estimate of ``G(0, x)`` independent of the quadrature.

    Walks from the origin are stopped on leaving the ball of the given
    radius.  Visits before that time are counted and the remainder is
    replaced by the continuum asymptotic evaluated at the stopping point.
    Returns estimates and standard errors.
    """
    targets = np.asarray(offsets, dtype=np.int64).reshape(-1, d)
    chunks = max(1, n_walks // 2_000_000)
    s1 = s2 = t1 = 0.0
    n = 0
    for c in range(chunks):
        m = n_walks // chunks + (1 if c < n_walks % chunks else 0)
        seed = int(rng.integers(0, 2**31 - 1))
        a, b, t, _ = _kernels.green_visits(targets, m, float(radius), seed)
        s1 = s1 + a
        s2 = s2 + b
        t1 = t1 + t
        n += m
    cst = float(continuum_green(1.0, d))
    mean = s1 / n + cst * t1 / n
    var = s2 / n - (s1 / n) ** 2
    return mean, np.sqrt(np.maximum(var, 0.0) / n)


# ---------------------------------------------------------------------------
# finite domains


class DomainOperator:
    """Sparse ``I - P`` for the walk killed on leaving a finite domain."""

    def __init__(self, domain: FiniteSet):
        self.domain = domain
        self.d = domain.d
        pts = domain.points
        self.n = len(pts)
        self._lo = pts.min(axis=0) - 2 if self.n else np.zeros(self.d, dtype=np.int64)
        hi = pts.max(axis=0) + 2 if self.n else np.zeros(self.d, dtype=np.int64)
        self._shape = tuple(int(v) for v in hi - self._lo + 1)
        self._codes = self.encode(pts)
        self._order = np.argsort(self._codes)
        self._sorted = self._codes[self._order]
        nb = neighbor_offsets(self.d)
        rows, cols = [], []
        for e in nb:
            j = self.lookup(pts + e)
            ok = j >= 0
            rows.append(np.nonzero(ok)[0])
            cols.append(j[ok])
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        adj = sparse.csc_matrix((np.full(len(rows), 1.0 / (2 * self.d)), (rows, cols)),
                                shape=(self.n, self.n))
        self.matrix = (sparse.identity(self.n, format="csc") - adj).tocsc()
        self._lu = None

    def encode(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.int64).reshape(-1, self.d) - self._lo
        out = np.zeros(len(pts), dtype=np.int64)
        bad = np.zeros(len(pts), dtype=bool)
        for i in range(self.d):
            bad |= (pts[:, i] < 0) | (pts[:, i] >= self._shape[i])
            out = out * self._shape[i] + np.clip(pts[:, i], 0, self._shape[i] - 1)
        out[bad] = -1
        return out

    def lookup(self, pts) -> np.ndarray:
        """Row index of each point in the domain, -1 when absent."""
        codes = self.encode(pts)
        pos = np.searchsorted(self._sorted, codes)
        pos = np.clip(pos, 0, max(self.n - 1, 0))
        hit = (self.n > 0) & (codes >= 0)
        if self.n:
            hit = hit & (self._sorted[pos] == codes)
        out = np.full(len(codes), -1, dtype=np.int64)
        out[hit] = self._order[pos[hit]]
        return out

    def coupling(self, targets) -> sparse.csr_matrix:
        """``B[x, k] = (1/2d) * #{neighbours of x equal to targets[k]}``."""
        targets = np.asarray(targets, dtype=np.int64).reshape(-1, self.d)
        rows, cols = [], []
        for e in neighbor_offsets(self.d):
            j = self.lookup(targets + e)
            ok = j >= 0
            rows.append(j[ok])
            cols.append(np.nonzero(ok)[0])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        return sparse.csr_matrix((np.full(len(rows), 1.0 / (2 * self.d)), (rows, cols)),
                                 shape=(self.n, len(targets)))

    @property
    def lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A",
                                 options=dict(SymmetricMode=True))
        return self._lu

    def solve(self, rhs, method: str = "lu", tol: float = 1e-12) -> np.ndarray:
        rhs = np.asarray(rhs.toarray() if sparse.issparse(rhs) else rhs, dtype=float)
        if method == "lu":
            return self.lu.solve(rhs)
        if method != "cg":
            raise ValueError(f"unknown method {method!r}")
        cols = rhs.reshape(self.n, -1)
        out = np.empty_like(cols)
        for k in range(cols.shape[1]):
            b = cols[:, k]
            sol, info = spla.cg(self.matrix, b, rtol=tol, atol=0.0, maxiter=20 * self.n + 100)
            res = float(np.linalg.norm(self.matrix @ sol - b))
            if info != 0 or res > 1e3 * tol * max(1.0, float(np.linalg.norm(b))):
                raise AccuracyError(f"conjugate gradient stalled, residual {res:.2e}")
            out[:, k] = sol
        return out.reshape(rhs.shape)


@dataclass
class KilledGreenMatrix:
    """Expected visit counts before leaving ``domain``.

    Columns are solved on demand from a shared factorisation; ``dense``
    materialises the whole matrix for small domains.
    """

    domain: FiniteSet
    op: DomainOperator = field(repr=False)

    def column(self, y) -> np.ndarray:
        j = self.op.lookup(np.asarray(y)[None, :])[0]
        if j < 0:
            raise KeyError(f"{tuple(y)} not in domain")
        e = np.zeros(self.op.n)
        e[j] = 1.0
        return self.op.solve(e)

    def columns(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        e = np.zeros((self.op.n, len(idx)))
        e[idx, np.arange(len(idx))] = 1.0
        return self.op.solve(e)

    def entry(self, x, y) -> float:
        i = self.op.lookup(np.asarray(x)[None, :])[0]
        if i < 0:
            return 0.0
        return float(self.column(y)[i])

    def dense(self) -> np.ndarray:
        if self.op.n > 20000:
            raise MemoryError("domain too large for a dense killed Green matrix")
        return self.columns(np.arange(self.op.n))

    def row_identity_residual(self, cols: np.ndarray, idx) -> float:
        """Max violation of ``K(x, y) = delta + (1/2d) sum_{x'~x} K(x', y)``."""
        e = np.zeros_like(cols)
        e[np.asarray(idx), np.arange(cols.shape[1])] = 1.0
        return float(np.abs(self.op.matrix @ cols - e).max())


def killed_green(domain: FiniteSet, max_points: int = 2_000_000) -> KilledGreenMatrix:
    if len(domain) > max_points:
        raise MemoryError(f"domain of {len(domain)} points exceeds budget {max_points}")
    return KilledGreenMatrix(domain, DomainOperator(domain))


def dirichlet_hitting(domain: FiniteSet, absorbing_classes: Sequence[FiniteSet], start,
                      method: str = "lu", op: DomainOperator | None = None) -> list[float]:
    """Probabilities that the walk from ``start`` leaves ``domain`` through each class.

    The classes must partition the outer vertex boundary of the domain.
    """
    start = tuple(int(c) for c in start)
    outer = outer_boundary(domain)
    total = sum(len(c) for c in absorbing_classes)
    union = FiniteSet(np.vstack([c.points for c in absorbing_classes]), domain.d) \
        if absorbing_classes else FiniteSet.empty(domain.d)
    if total != len(union) or union != outer:
        raise ValueError("absorbing classes must partition the outer boundary of the domain")
    for k, c in enumerate(absorbing_classes):
        if start in c:
            return [1.0 if j == k else 0.0 for j in range(len(absorbing_classes))]
    if start not in domain:
        raise ValueError("start must lie in the domain or on its outer boundary")
    op = op or DomainOperator(domain)
    rhs = np.zeros((op.n, len(absorbing_classes)))
    for k, c in enumerate(absorbing_classes):
        rhs[:, k] = np.asarray(op.coupling(c.points).sum(axis=1)).ravel()
    sol = op.solve(rhs, method=method)
    row = op.lookup(np.asarray(start)[None])[0]
    probs = [float(p) for p in np.atleast_1d(sol[row])]
    if abs(sum(probs) - 1.0) > 1e-9:
        raise AccuracyError(f"hitting probabilities sum to {sum(probs)!r}")
    return probs


# ---------------------------------------------------------------------------
# capacity and equilibrium measure


@dataclass
class EquilibriumMeasure:
    support: FiniteSet
    weights: np.ndarray
    total: float

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.total if self.total > 0 else self.weights

    def weight(self, x) -> float:
        return float(self.weights[self.support.index_of(x)])

    def cdf(self) -> np.ndarray:
        c = np.cumsum(np.maximum(self.weights, 0.0))
        return c / c[-1]


def _last_exit_weights(A: FiniteSet, green: GreenTable) -> np.ndarray:
    if len(A) == 0:
        return np.zeros(0)
    Gm = green.matrix(A.points)
    try:
        cf = sla.cho_factor(Gm)
    except np.linalg.LinAlgError as exc:
        raise CapacityInputError("singular last-exit system") from exc
    return sla.cho_solve(cf, np.ones(len(A)))


def equilibrium_measure(A: FiniteSet, green: GreenTable | None = None) -> EquilibriumMeasure:
    """Escape-probability weights from the last-exit system ``G e = 1`` on ``A``."""
    if len(A) == 0:
        raise CapacityInputError("equilibrium measure of the empty set")
    green = green or green_table(A.d)
    e = _last_exit_weights(A, green)
    return EquilibriumMeasure(A, e, float(e.sum()))


def capacity(A: FiniteSet, method: str = "last_exit_solve", *, rng=None,
             green: GreenTable | None = None, r_big_factor: float = 10.0,
             rel_tol: float = 0.0033, pilot: int = 2000) -> tuple[float, float]:
    """Capacity of ``A`` with an error bound.

    ``last_exit_solve`` uses the free-Green linear system; the bound
    propagates the quadrature accuracy.  ``mc_escape`` estimates each
    boundary point's escape probability by simulation (see
    :func:`escape_capacity`) and returns the standard error.
    """
    if method == "last_exit_solve":
        if len(A) == 0:
            return 0.0, 0.0
        green = green or green_table(A.d)
        e = _last_exit_weights(A, green)
        bound = float(np.abs(e).sum() ** 2 * max(green.accuracy, 1e-15) * len(A))
        return float(e.sum()), bound
    if method == "mc_escape":
        if len(A) == 0:
            raise CapacityInputError("mc_escape needs a nonempty set")
        if rng is None:
            raise ValueError("mc_escape needs a random generator")
        est = escape_capacity(A, rng, r_big_factor=r_big_factor, rel_tol=rel_tol, pilot=pilot)
        return est.value, est.std_error
    raise ValueError(f"unknown capacity method {method!r}")


@dataclass
class EscapeEstimate:
    value: float
    std_error: float
    weights: np.ndarray
    support: FiniteSet
    walks: int


def escape_capacity(A: FiniteSet, rng: np.random.Generator, r_big_factor: float = 10.0,
                    rel_tol: float = 0.0033, pilot: int = 2000, iterations: int = 4) -> EscapeEstimate:
    """Capacity as the sum of simulated escape probabilities.

    Walks from each boundary point run until they return to ``A`` or reach
    the sphere of radius ``r_big_factor * (radius(A) + 1)``.  A walk at the
    sphere point ``z`` still returns with probability
    ``sum_a e(a) G(z - a)``; that probability is evaluated with the
    continuum asymptotic of ``G`` and the escape weights being estimated,
    iterated to a fixed point.  Nothing here uses the quadrature table.
    """
    d = A.d
    bd = boundary(A)
    center = A.points.mean(axis=0)
    rad = float(np.sqrt(((A.points - center) ** 2).sum(1)).max())
    R = r_big_factor * (rad + 1.0)
    lo = A.points.min(axis=0)
    mask = np.zeros(tuple(A.points.max(axis=0) - lo + 1), dtype=np.bool_)
    mask[tuple((A.points - lo).T)] = True

    def run(x, n):
        seed = int(rng.integers(0, 2**31 - 1))
        pts, m = _kernels.escape_walks(mask, lo, x, int(n), center.astype(float), R, seed)
        return pts

    # pilot pass fixes the stratified allocation
    reach_frac = np.array([len(run(x, pilot)) / pilot for x in bd.points])
    sd = np.sqrt(np.clip(reach_frac * (1 - reach_frac), 1e-4, None))
    cap_guess = max(reach_frac.sum(), 1e-3)
    total = (sd.sum() / (rel_tol * cap_guess)) ** 2
    alloc = np.maximum(pilot, np.ceil(total * sd / sd.sum())).astype(np.int64)
    reached = [run(x, n) for x, n in zip(bd.points, alloc)]
    e = np.array([len(p) / n for p, n in zip(reached, alloc)])
    for _ in range(iterations):
        new = np.empty_like(e)
        for k, pts in enumerate(reached):
            if len(pts) == 0:
                new[k] = 0.0
                continue
            dist = np.sqrt(((pts[:, None, :] - bd.points[None, :, :]) ** 2).sum(-1))
            back = continuum_green(dist, d) @ e
            new[k] = (1.0 - back).sum() / alloc[k]
        e = new
    var = np.zeros(len(bd))
    for k, pts in enumerate(reached):
        if len(pts):
            dist = np.sqrt(((pts[:, None, :] - bd.points[None, :, :]) ** 2).sum(-1))
            vals = np.zeros(alloc[k])
            vals[: len(pts)] = 1.0 - continuum_green(dist, d) @ e
            var[k] = vals.var() / alloc[k]
    return EscapeEstimate(float(e.sum()), float(np.sqrt(var.sum())), e, bd, int(alloc.sum()))


def sample_equilibrium(A: FiniteSet, rng: np.random.Generator, size: int | None = None,
                       measure: EquilibriumMeasure | None = None):
    """Draw points of ``A`` with probability proportional to the escape weights."""
    measure = measure or equilibrium_measure(A)
    w = np.clip(measure.weights, 0.0, None)
    idx = rng.choice(len(A), size=size, p=w / w.sum())
    if size is None:
        return tuple(int(c) for c in A.points[idx])
    return A.points[idx]


def return_probability(x, target: FiniteSet, measure: EquilibriumMeasure | None = None,
                       green: GreenTable | None = None) -> float:
    """``P_x[H_target < inf] = sum_y G(x, y) e_target(y)`` (last-exit identity)."""
    if len(target) == 0:
        return 0.0
    green = green or green_table(target.d)
    measure = measure or equilibrium_measure(target, green)
    g = green.matrix(np.asarray(x)[None, :], target.points)[0]
    p = float(g @ measure.weights)
    if p > 1 + 1e-9:
        raise OracleError(f"return probability {p} exceeds one")
    return min(p, 1.0)


class HittingKernel:
    """Exact hitting law of a finite target from points outside it.

    For ``x`` outside the target the vector ``h(y) = P_x[X_{H} = y, H < inf]``
    solves ``G_TT h = G(T, x)``; it is computed from a Cholesky factor.
    """

    def __init__(self, target: FiniteSet, green: GreenTable | None = None):
        self.target = target
        self.green = green or green_table(target.d)
        self.measure = equilibrium_measure(target, self.green)
        self._cf = sla.cho_factor(self.green.matrix(target.points))

    def law(self, xs) -> np.ndarray:
        """Rows of hitting probabilities for each start in ``xs``."""
        xs = np.asarray(xs, dtype=np.int64).reshape(-1, self.target.d)
        rhs = self.green.matrix(self.target.points, xs)
        h = sla.cho_solve(self._cf, rhs).T
        return np.clip(h, 0.0, None)
