"""Exact excursion-endpoint densities.

An excursion runs from an entrance point ``w`` in ``v`` until it first leaves
``a2_complement`` at ``y``.  Its endpoint pair is (first entrance into
``a1``, last visit to ``v``), or ``THETA`` when ``a1`` is missed.  Splitting
the path at those two times gives

    P_w[pair = (w0, y0), exit = y]
        = alpha_w(w0) * KG(w0, y0) * Esc(y0, y)

where ``alpha_w(w0)`` is the probability to enter ``a1`` first at ``w0``
before leaving, ``KG`` counts visits before leaving, and ``Esc(y0, y)`` is
the probability to leave at ``y`` without coming back to ``v``.  Dividing by
the exit probability ``P_w[exit = y]`` gives the density of the pair under
the exit-conditioned law.  All factors are solved once per geometry.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg as sla
from scipy import sparse

from . import _kernels
from .geometry import A1, DA2, V, FiniteSet, GeometryTriple, build_geometry, neighbor_offsets
from .potential import DomainOperator, green_table
from .walk import THETA, Path, StepCapExceeded, SupportError, kernel_seed

log = logging.getLogger(__name__)

CHUNK = 256


def cluster_order(points: np.ndarray, leaf: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Permutation grouping points into spatially compact runs of at most ``leaf``.

    Recursive median bisection along the widest axis.  Returns the
    permutation and the start offsets of the runs (with a final sentinel).
    """
    order = []
    starts = [0]
    stack = [np.arange(len(points))]
    while stack:
        idx = stack.pop()
        if len(idx) <= leaf:
            order.append(idx)
            starts.append(starts[-1] + len(idx))
            continue
        pts = points[idx]
        ax = int(np.argmax(pts.max(0) - pts.min(0)))
        srt = idx[np.argsort(pts[:, ax], kind="stable")]
        half = len(srt) // 2
        stack.append(srt[half:])
        stack.append(srt[:half])
    return np.concatenate(order), np.asarray(starts, dtype=np.int64)


class EndpointSpace:
    """Atoms ``(w0, y0)`` in ``boundary(a1) x v`` plus ``THETA``.

    Both factors are ordered by :func:`cluster_order`, so atom
    ``i * n_cols + j`` pairs row ``i`` with column ``j`` and the
    ``(row run, column run)`` rectangles are compact in space.
    """

    def __init__(self, g: GeometryTriple, leaf: int = 16):
        self.g = g
        rp, self.row_starts = cluster_order(g.boundary_a1.points, leaf)
        cp, self.col_starts = cluster_order(g.v.points, leaf)
        self.rows = g.boundary_a1.points[rp]
        self.cols = g.v.points[cp]
        self.n_rows = len(self.rows)
        self.n_cols = len(self.cols)
        self.theta = self.n_rows * self.n_cols
        self.size = self.theta + 1
        self._row_of = {tuple(p): i for i, p in enumerate(self.rows.tolist())}
        self._col_of = {tuple(p): j for j, p in enumerate(self.cols.tolist())}

    def row(self, w0) -> int:
        return self._row_of[tuple(int(c) for c in w0)]

    def col(self, y0) -> int:
        return self._col_of[tuple(int(c) for c in y0)]

    def atom(self, pair) -> int:
        if pair is THETA:
            return self.theta
        w0, y0 = pair
        return self.row(w0) * self.n_cols + self.col(y0)

    def pair(self, atom: int):
        if atom == self.theta:
            return THETA
        i, j = divmod(int(atom), self.n_cols)
        return tuple(int(c) for c in self.rows[i]), tuple(int(c) for c in self.cols[j])


def _adjacency(A: np.ndarray, B: np.ndarray, d: int) -> sparse.csr_matrix:
    """``(1/2d) * 1{a ~ b}`` as a sparse ``len(A) x len(B)`` matrix."""
    op = _PointLookup(B)
    rows, cols = [], []
    for e in neighbor_offsets(d):
        j = op.lookup(A + e)
        ok = j >= 0
        rows.append(np.nonzero(ok)[0])
        cols.append(j[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    return sparse.csr_matrix((np.full(len(rows), 1.0 / (2 * d)), (rows, cols)), shape=(len(A), len(B)))


class _PointLookup:
    def __init__(self, pts):
        self._d = {tuple(p): i for i, p in enumerate(np.asarray(pts).tolist())}

    def lookup(self, pts):
        return np.array([self._d.get(tuple(p), -1) for p in np.asarray(pts).tolist()], dtype=np.int64)


@dataclass
class EndpointKernels:
    """All exact factors for one geometry, in :class:`EndpointSpace` order.

    Attributes (``nV = |v|``, ``nA = |boundary(a1)|``, ``nY = |outer boundary|``):
    ``alpha`` (nV, nA) first-entrance law into ``a1`` from each ``w``;
    ``kg`` (nA, nV) killed Green function between the two factors;
    ``kg_diag`` (nV,) killed Green function on the diagonal of ``v``;
    ``esc`` (nV, nY) leave-at-``y``-without-returning probabilities;
    ``exit`` (nV, nY) exit law from each ``w``;
    ``theta_exit`` (nV, nY) exit law restricted to missing ``a1``;
    ``ret`` (nY, nV) hitting law of ``v`` from each outer-boundary point;
    ``eq_v`` (nV,) equilibrium measure of ``v``.
    """

    g: GeometryTriple
    space: EndpointSpace
    alpha: np.ndarray
    kg: np.ndarray
    kg_diag: np.ndarray
    esc: np.ndarray
    exit: np.ndarray
    theta_exit: np.ndarray
    ret: np.ndarray
    eq_v: np.ndarray
    ys: np.ndarray
    kg_columns: np.ndarray | None = field(default=None, repr=False)  # (nV, |a2_complement|) float32
    _op: DomainOperator | None = field(default=None, repr=False)

    @property
    def cap_v(self) -> float:
        return float(self.eq_v.sum())

    @property
    def p_return(self) -> np.ndarray:
        return self.ret.sum(axis=1)

    @property
    def op_a2c(self) -> DomainOperator:
        if self._op is None:
            self._op = DomainOperator(self.g.a2_complement)
        return self._op

    def y_index(self, y) -> int:
        return self.g.boundary_a2.index_of(y)

    def h_column(self, j: int) -> np.ndarray:
        """Killed Green function ``KG(., y0)`` on ``a2_complement`` for column ``j``."""
        if self.kg_columns is not None:
            return self.kg_columns[j]
        op = self.op_a2c
        e = np.zeros(op.n)
        e[op.lookup(self.space.cols[j][None])[0]] = 1.0
        return op.solve(e)


def _solve_columns(op: DomainOperator, rhs_builder, n: int, reducer):
    for a in range(0, n, CHUNK):
        b = min(n, a + CHUNK)
        sol = op.solve(rhs_builder(a, b))
        reducer(a, b, sol)


def compute_kernels(g: GeometryTriple, keep_columns_bytes: int = 1_500_000_000,
                    leaf: int = 16) -> EndpointKernels:
    space = EndpointSpace(g, leaf)
    d = g.d
    rows, cols = space.rows, space.cols
    nA, nV = len(rows), len(cols)
    ys = g.boundary_a2.points
    nY = len(ys)

    # killed Green function on a2_complement, one column per point of v
    op = DomainOperator(g.a2_complement)
    v_rows = op.lookup(cols)
    a_rows = op.lookup(rows)
    B_exit = op.coupling(ys).T.tocsr()  # (nY, n)
    kg = np.empty((nA, nV))
    kg_diag = np.empty(nV)
    exit_ = np.empty((nV, nY))
    keep = op.n * nV * 4 <= keep_columns_bytes
    kg_cols = np.empty((nV, op.n), dtype=np.float32) if keep else None

    def rhs_unit(idx):
        def build(a, b):
            e = np.zeros((op.n, b - a))
            e[idx[a:b], np.arange(b - a)] = 1.0
            return e
        return build

    def red_kg(a, b, sol):
        kg[:, a:b] = sol[a_rows]
        kg_diag[a:b] = sol[v_rows[a:b], np.arange(b - a)]
        exit_[a:b] = (B_exit @ sol).T
        if keep:
            kg_cols[a:b] = sol.T

    _solve_columns(op, rhs_unit(v_rows), nV, red_kg)

    # first entrance into a1 before leaving: domain a2_complement minus a1
    dom1 = FiniteSet(g.a2_complement.points[(g.box.labels[g.box.flat(g.a2_complement.points)] & A1) == 0], d)
    op1 = DomainOperator(dom1)
    w_rows1 = op1.lookup(cols)
    B_alpha = op1.coupling(rows).T.tocsr()
    B_theta = op1.coupling(ys).T.tocsr()
    alpha = np.empty((nV, nA))
    theta_exit = np.empty((nV, nY))

    def rhs_unit1(a, b):
        e = np.zeros((op1.n, b - a))
        e[w_rows1[a:b], np.arange(b - a)] = 1.0
        return e

    def red_alpha(a, b, sol):
        alpha[a:b] = (B_alpha @ sol).T
        theta_exit[a:b] = (B_theta @ sol).T

    _solve_columns(op1, rhs_unit1, nV, red_alpha)

    # leaving at y without returning to v: domain a2_complement minus u
    lab = g.box.labels[g.box.flat(g.a2_complement.points)]
    dom2 = FiniteSet(g.a2_complement.points[(lab & 2) == 0], d)
    op2 = DomainOperator(dom2)
    C_start = op2.coupling(cols)  # (n2, nV): (1/2d) 1{x ~ y0}
    C_exit = op2.coupling(ys).T.tocsr()
    direct = _adjacency(cols, ys, d).toarray()
    esc = np.empty((nV, nY))

    def rhs_esc(a, b):
        return C_start[:, a:b].toarray()

    def red_esc(a, b, sol):
        esc[a:b] = (C_exit @ sol).T + direct[a:b]

    _solve_columns(op2, rhs_esc, nV, red_esc)

    # return to v from the outer boundary on the infinite lattice
    green = green_table(d)
    cf = sla.cho_factor(green.matrix(cols))
    eq_v = sla.cho_solve(cf, np.ones(nV))
    ret = np.empty((nY, nV))
    for a in range(0, nY, 1024):
        b = min(nY, a + 1024)
        ret[a:b] = sla.cho_solve(cf, green.matrix(cols, ys[a:b])).T
    np.clip(ret, 0.0, None, out=ret)
    kern = EndpointKernels(g, space, alpha, kg, kg_diag, esc, exit_, theta_exit, ret, eq_v, ys,
                           kg_cols, op)
    return kern


@lru_cache(maxsize=2)
def kernels_for(shape: str, r: int, s: int, d: int = 3) -> EndpointKernels:
    """Cached :func:`compute_kernels` keyed by geometry parameters."""
    return compute_kernels(build_geometry(shape, r, s, d))


# ---------------------------------------------------------------------------
# densities


@dataclass
class DensityTable:
    source: tuple
    masses: np.ndarray  # (n_rows, n_cols)
    theta: float
    theta_direct: float

    @property
    def total(self) -> float:
        return float(self.masses.sum() + self.theta)

    def vector(self) -> np.ndarray:
        return np.append(self.masses.ravel(), self.theta)


def density_factors(kern: EndpointKernels, wi: int, yi: int) -> tuple[float, np.ndarray, np.ndarray, float]:
    """``(c, a, b, theta)`` with density ``c * a[i] * kg[i, j] * b[j]`` on pairs."""
    p = kern.exit[wi, yi]
    if p <= 0:
        raise SupportError("zero exit probability for this source")
    c = 1.0 / p
    return c, kern.alpha[wi], kern.esc[:, yi], kern.theta_exit[wi, yi] * c


def exact_density_table(w, y, kern: EndpointKernels) -> DensityTable:
    """Endpoint-pair law of an excursion from ``w`` conditioned to exit at ``y``."""
    wi = kern.space.col(w)
    yi = kern.y_index(y)
    c, a, b, th = density_factors(kern, wi, yi)
    masses = c * a[:, None] * kern.kg * b[None, :]
    return DensityTable((tuple(w), tuple(y)), masses, float(1.0 - masses.sum()), float(th))


def f_a1(w0, y0, kern: EndpointKernels) -> float:
    """Probability that the walk from ``w0`` visits ``y0`` before leaving ``a2_complement``."""
    i = kern.space.row(w0)
    j = kern.space.col(y0)
    return float(kern.kg[i, j] / kern.kg_diag[j])


def reverse_escape(y0, y, kern: EndpointKernels, method: str = "cg") -> float:
    """``P_{y0}[leave at y before returning to v]`` solved from the ``y`` side.

    Uses a separate linear solve whose right-hand side sits next to ``y``
    rather than next to ``y0``, so agreement with ``kern.esc`` is the
    reversibility identity of the walk.
    """
    g = kern.g
    lab = g.box.labels[g.box.flat(g.a2_complement.points)]
    dom2 = FiniteSet(g.a2_complement.points[(lab & 2) == 0], g.d)
    op2 = DomainOperator(dom2)
    k = op2.solve(np.asarray(op2.coupling(np.asarray(y)[None]).todense()).ravel(), method=method)
    nb = np.asarray(y0)[None, :] + neighbor_offsets(g.d)
    idx = op2.lookup(nb)
    val = k[idx[idx >= 0]].sum() / (2 * g.d)
    val += float(np.any(np.abs(nb - np.asarray(y)).sum(1) == 0)) / (2 * g.d)
    return float(val)


@dataclass
class DensityNeighborhood:
    center: tuple
    radius: float
    members: list
    alpha: float
    ell: float
    n_sources: int | None


def alpha_ell(center, c4: float, kern: EndpointKernels, n_sources: int | None = None,
              rng: np.random.Generator | None = None) -> DensityNeighborhood:
    """Worst density ratio over the neighbourhood of a pair and the largest centre density.

    The ratio ``g(pair) / g(center)`` factorises into a ``w``-dependent
    entrance ratio, a fixed killed-Green ratio and a ``y``-dependent escape
    ratio, so the infimum over all sources is exact.  With ``n_sources`` a
    random subsample of sources is used instead.
    """
    w0, y0 = center
    sp = kern.space
    i0, j0 = sp.row(w0), sp.col(y0)
    rad = c4 * kern.g.s
    di = np.sqrt(((sp.rows - np.asarray(w0)) ** 2).sum(1))
    dj = np.sqrt(((sp.cols - np.asarray(y0)) ** 2).sum(1))
    I = np.nonzero(di <= rad + 1e-9)[0]
    J = np.nonzero(dj <= rad + 1e-9)[0]
    members = [(sp.pair(i * sp.n_cols + j)) for i in I for j in J]
    if not members:
        raise ValueError("empty neighbourhood")
    with np.errstate(divide="ignore", invalid="ignore"):
        if n_sources is None:
            W = np.nonzero(kern.alpha[:, i0] > 0)[0]
            Y = np.nonzero(kern.esc[j0] > 0)[0]
            ra = (kern.alpha[W][:, I] / kern.alpha[W, i0][:, None]).min(0)
            re = (kern.esc[J][:, Y] / kern.esc[j0, Y][None, :]).min(1)
            alpha = float((ra[:, None] * (kern.kg[np.ix_(I, J)] / kern.kg[i0, j0]) * re[None, :]).min())
            big = kern.alpha[:, i0][:, None] * kern.esc[j0][None, :] / kern.exit
            big[~np.isfinite(big)] = 0.0
            ell = float(kern.kg[i0, j0] * big.max())
            used = None
        else:
            rng = rng or np.random.default_rng(0)
            alpha, ell = np.inf, 0.0
            used = 0
            while used < n_sources:
                wi = int(rng.integers(sp.n_cols))
                yi = int(rng.integers(len(kern.ys)))
                if kern.exit[wi, yi] <= 0 or kern.alpha[wi, i0] <= 0 or kern.esc[j0, yi] <= 0:
                    continue
                used += 1
                ratio = (kern.alpha[wi, I][:, None] * kern.kg[np.ix_(I, J)] * kern.esc[J, yi][None, :]
                         / (kern.alpha[wi, i0] * kern.kg[i0, j0] * kern.esc[j0, yi]))
                alpha = min(alpha, float(ratio.min()))
                ell = max(ell, float(kern.alpha[wi, i0] * kern.kg[i0, j0] * kern.esc[j0, yi]
                                     / kern.exit[wi, yi]))
    return DensityNeighborhood(sp.pair(i0 * sp.n_cols + j0), rad, members, alpha, ell, used)


def sup_density(kern: EndpointKernels, n_w: int = 200, rng: np.random.Generator | None = None) -> float:
    """Largest pair density over sources with ``w`` in a random subsample of ``v``."""
    rng = rng or np.random.default_rng(0)
    nV = kern.space.n_cols
    ws = rng.choice(nV, size=min(n_w, nV), replace=False)
    best = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        for wi in ws:
            q = kern.esc / kern.exit[wi][None, :]
            q[~np.isfinite(q)] = 0.0
            qmax = q.max(axis=1)
            val = (kern.alpha[wi][:, None] * kern.kg * qmax[None, :]).max()
            best = max(best, float(val))
    return best


# ---------------------------------------------------------------------------
# conditional excursion paths


class ExcursionSampler:
    """Excursion pieces from ``w0`` to a last ``v``-visit at ``y0``.

    ``exact`` mode runs the walk transformed by ``h = KG(., y0)``, stopping
    at each visit to ``y0`` with probability ``1 / KG(y0, y0)``.
    ``rejection`` mode runs free walks from ``w0`` until they leave and keeps
    the first one whose last ``v``-visit is ``y0``.
    """

    def __init__(self, kern: EndpointKernels, cache_columns: int = 256):
        self.kern = kern
        g = kern.g
        self._imap = g.box.index_map(g.a2_complement.points)
        self._cache: dict = {}
        self._order: list = []
        self._cap = cache_columns

    def _h(self, j: int) -> np.ndarray:
        if self.kern.kg_columns is not None:
            return self.kern.kg_columns[j]
        col = self._cache.get(j)
        if col is None:
            col = self.kern.h_column(j)
            self._cache[j] = col
            self._order.append(j)
            if len(self._order) > self._cap:
                self._cache.pop(self._order.pop(0))
        return col

    def sample_cells(self, i: int, j: int, rng: np.random.Generator, mode: str = "exact",
                     max_attempts: int = 100_000, step_cap: int = 10**8):
        kern = self.kern
        g = kern.g
        if kern.kg[i, j] <= 0:
            raise SupportError("pair is unreachable")
        start = int(g.box.flat(kern.space.rows[i][None])[0])
        target = int(g.box.flat(kern.space.cols[j][None])[0])
        if mode == "exact":
            cells, fail = _kernels.h_walk_indexed(self._h(j), self._imap, g.box.strides, start, target,
                                                  1.0 / kern.kg_diag[j], step_cap, kernel_seed(rng))
            if fail:
                raise StepCapExceeded(Path(g.box.coords(cells)))
            return cells, 1
        for attempt in range(1, max_attempts + 1):
            cells, fail = _kernels.walk_until_label(g.box.labels, g.box.strides, start, DA2,
                                                    step_cap, kernel_seed(rng))
            if fail:
                raise StepCapExceeded(Path(g.box.coords(cells)))
            inv = np.nonzero(g.box.labels[cells] & V)[0]
            if len(inv) and cells[inv[-1]] == target:
                return cells[: inv[-1] + 1], attempt
        raise RareEventError(f"no acceptance in {max_attempts} attempts; use exact mode")


class RareEventError(RuntimeError):
    pass


def sample_excursion_given_endpoints(w0, y0, kern: EndpointKernels, rng: np.random.Generator,
                                     mode: str = "exact", max_attempts: int = 100_000,
                                     sampler: ExcursionSampler | None = None) -> Path:
    sampler = sampler or ExcursionSampler(kern)
    i, j = kern.space.row(w0), kern.space.col(y0)
    cells, _ = sampler.sample_cells(i, j, rng, mode=mode, max_attempts=max_attempts)
    return Path(kern.g.box.coords(cells))


def acceptance_probability(w0, y0, kern: EndpointKernels) -> float:
    """Chance that a free excursion from ``w0`` has its last ``v``-visit at ``y0``."""
    i, j = kern.space.row(w0), kern.space.col(y0)
    return float(kern.kg[i, j] * kern.esc[j].sum())


def expected_pair_counts(kern: EndpointKernels) -> tuple[np.ndarray, float]:
    """Mean soft local time of one clothesline started from the equilibrium law.

    With ``m`` the expected number of entrances at each ``w`` (solving
    ``m = e_bar + m Q`` for the entrance-to-entrance kernel ``Q``) the mean
    is ``sum_{w,y} m(w) exit(w,y) g_{(w,y)}``, which factorises as
    ``KG(w0,y0) * (m alpha)(w0) * sum_y Esc(y0,y)``.  Returns the pair
    matrix and the ``THETA`` entry.
    """
    ebar = kern.eq_v / kern.eq_v.sum()
    Q = kern.exit @ kern.ret
    m = np.linalg.solve((np.eye(len(Q)) - Q).T, ebar)
    a = m @ kern.alpha
    b = kern.esc.sum(axis=1)
    pairs = kern.kg * a[:, None] * b[None, :]
    theta = float(m @ kern.theta_exit.sum(axis=1))
    return pairs, theta


__all__ = [
    "DensityNeighborhood", "DensityTable", "EndpointKernels", "EndpointSpace", "ExcursionSampler",
    "RareEventError", "acceptance_probability", "alpha_ell", "compute_kernels", "exact_density_table",
    "expected_pair_counts", "f_a1", "kernels_for", "reverse_escape", "sample_excursion_given_endpoints",
    "sup_density",
]
