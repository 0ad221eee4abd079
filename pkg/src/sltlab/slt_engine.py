"""Soft local times on a finite atom space.

A Poisson sheet puts independent exponential stacks of heights above every
atom.  Given a probability density ``g`` the next step raises the running
function ``G`` by ``xi * g`` where ``xi`` is the smallest multiple that
touches an unused height; the touched atom is the selected one.  Repeating
with densities that may depend on earlier selections reproduces the law of
the corresponding Markov chain, and processes driven on a common sheet are
coupled: whenever one function lies below another, so do the selected
points.

Two engines share the :class:`PoissonSheet` type.  :class:`SltState`
handles an arbitrary dense density vector.  :class:`FactoredSltState`
handles densities of the product form ``c * a[i] * K[i, j] * b[j]`` on a
grid of atoms plus one extra atom, and only inspects rectangles of atoms
whose bound on the touching time beats the current best.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from .walk import THETA, Path

log = logging.getLogger(__name__)


class DegenerateDensityError(ValueError):
    pass


class SheetMismatchError(ValueError):
    pass


class NoPathError(LookupError):
    """The point sits on the atom of excursions that miss ``a1``."""


class AtomSpace:
    """Finite atoms ``0..n-1`` with positive masses."""

    def __init__(self, masses):
        masses = np.asarray(masses, dtype=float)
        if masses.ndim != 1 or len(masses) == 0 or (masses <= 0).any():
            raise ValueError("masses must be a nonempty vector of positive reals")
        self.masses = masses

    @classmethod
    def unit(cls, n: int) -> "AtomSpace":
        return cls(np.ones(n))

    @property
    def size(self) -> int:
        return len(self.masses)

    @property
    def uniform(self) -> bool:
        return bool((self.masses == 1.0).all())


class PoissonSheet:
    """Lazily realised Poisson process on ``atoms x [0, inf)``.

    First heights come in blocks of ``BLOCK`` atoms, each block from its own
    seeded stream; the rest of an atom's stack comes from a per-atom stream.
    Every height is therefore a function of ``(seed, atom, rank)`` alone,
    whatever the order of queries.
    """

    BLOCK = 4096

    def __init__(self, space: AtomSpace, seed: int, stacks: dict | None = None):
        self.space = space
        self.seed = int(seed)
        self._blocks: dict[int, np.ndarray] = {}
        self._deep: dict[int, list] = {}
        self._gens: dict[int, np.random.Generator] = {}
        self.paths: dict = {}
        for atom, hs in (stacks or {}).items():
            hs = [float(h) for h in hs]
            if not hs or hs[0] <= 0 or any(b <= a for a, b in zip(hs, hs[1:])):
                raise ValueError("prescribed heights must be positive and increasing")
            self._deep[int(atom)] = hs

    def _block(self, k: int) -> np.ndarray:
        blk = self._blocks.get(k)
        if blk is None:
            lo = k * self.BLOCK
            hi = min(self.space.size, lo + self.BLOCK)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 0, k])))
            blk = rng.exponential(1.0, size=hi - lo) / self.space.masses[lo:hi]
            self._blocks[k] = blk
        return blk

    def first_heights(self) -> np.ndarray:
        n = self.space.size
        out = np.concatenate([self._block(k) for k in range((n + self.BLOCK - 1) // self.BLOCK)])
        for atom, hs in self._deep.items():
            out[atom] = hs[0]
        return out

    def height(self, atom: int, rank: int) -> float:
        """Height number ``rank`` (from 0) above ``atom``."""
        atom = int(atom)
        stack = self._deep.get(atom)
        if stack is None:
            stack = [float(self._block(atom // self.BLOCK)[atom % self.BLOCK])]
            self._deep[atom] = stack
        if rank < len(stack):
            return stack[rank]
        gen = self._gens.get(atom)
        if gen is None:
            gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 1, atom])))
            self._gens[atom] = gen
        scale = 1.0 / self.space.masses[atom]
        while len(stack) <= rank:
            stack.append(stack[-1] + float(gen.exponential(scale)))
        return stack[rank]

    def heights_below(self, atom: int, level: float) -> list:
        out = []
        k = 0
        while True:
            h = self.height(atom, k)
            if h > level:
                return out
            out.append(h)
            k += 1

    def path_rng(self, atom: int, rank: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 2, int(atom), int(rank)])))


@dataclass
class Step:
    xi: float
    chosen: int
    density_id: object = None


class SltState:
    """Soft local time ``G`` built on a sheet, with its step history."""

    def __init__(self, sheet: PoissonSheet, keep_densities: bool = True):
        self.sheet = sheet
        n = sheet.space.size
        self.g_accum = np.zeros(n)
        self.ptr = np.zeros(n, dtype=np.int64)
        self._next = sheet.first_heights().copy()
        self.history: list[Step] = []
        self.densities: list[np.ndarray] = [] if keep_densities else None
        self.ties = 0

    @property
    def steps(self) -> int:
        return len(self.history)

    def used_points(self) -> list:
        """Sheet points touched so far as ``(atom, rank)`` in selection order."""
        seen: dict[int, int] = {}
        out = []
        for st in self.history:
            k = seen.get(st.chosen, 0)
            out.append((st.chosen, k))
            seen[st.chosen] = k + 1
        return out

    def g_accum_full(self) -> np.ndarray:
        return self.g_accum

    def recomputed(self) -> np.ndarray:
        if self.densities is None:
            raise ValueError("densities were not kept")
        out = np.zeros_like(self.g_accum)
        for st, g in zip(self.history, self.densities):
            out += st.xi * g
        return out


def slt_step(state: SltState, g, density_id=None) -> tuple[float, int]:
    """Advance ``state`` by one step driven by the density ``g``."""
    g = np.asarray(g, dtype=float)
    space = state.sheet.space
    if g.shape != (space.size,):
        raise ValueError("density has the wrong length")
    if (g < 0).any():
        raise ValueError("density must be nonnegative")
    pos = np.nonzero(g > 0)[0]
    if len(pos) == 0:
        raise DegenerateDensityError("density vanishes identically")
    total = float(g @ space.masses)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"density integrates to {total}, not 1")
    ratio = (state._next[pos] - state.g_accum[pos]) / g[pos]
    xi = float(ratio.min())
    hits = pos[ratio == xi]
    chosen = int(hits[0])
    if len(hits) > 1:
        state.ties += 1
        log.warning("tie between atoms %s at xi=%r; keeping %d", hits.tolist(), xi, chosen)
    state.g_accum += xi * g
    state.g_accum[chosen] = state._next[chosen]
    state.ptr[chosen] += 1
    state._next[chosen] = state.sheet.height(chosen, int(state.ptr[chosen]))
    state.history.append(Step(xi, chosen, density_id))
    if state.densities is not None:
        state.densities.append(g.copy())
    return xi, chosen


def run_slt(state, density_sequence: Callable, stop: Callable) -> "SltState":
    """Step until ``stop(history)`` holds.

    ``density_sequence(history)`` returns the next density; for a
    :class:`FactoredSltState` it returns ``(c, a, b, theta)`` or a source
    index pair understood by :meth:`FactoredSltState.step_source`.
    """
    while not stop(state.history):
        g = density_sequence(state.history)
        if isinstance(state, FactoredSltState):
            if isinstance(g, tuple) and len(g) == 2:
                state.step_source(*g)
            else:
                state.step(*g)
        else:
            slt_step(state, g)
    return state


@dataclass
class DominanceResult:
    dominated: bool
    witness: int | None = None
    used_inclusion: bool | None = None

    def __bool__(self):
        return self.dominated


def dominance_certificate(low, high) -> DominanceResult:
    """Check ``G_low <= G_high`` everywhere and the matching inclusion of used points."""
    if low.sheet is not high.sheet:
        raise SheetMismatchError("states live on different sheets")
    gl, gh = low.g_accum_full(), high.g_accum_full()
    bad = np.nonzero(gl > gh)[0]
    if len(bad):
        return DominanceResult(False, int(bad[0]))
    sheet = low.sheet
    used = np.nonzero(low.ptr > 0)[0]
    ok = all(sheet.height(a, int(low.ptr[a]) - 1) <= gh[a] for a in used)
    return DominanceResult(True, None, ok)


def attach_path(sheet: PoissonSheet, point: tuple, sampler) -> Path:
    """Excursion hung on a sheet point, sampled once and then memoised.

    ``sampler`` is an :class:`~sltlab.endpoint_densities.ExcursionSampler`;
    ``point`` is ``(atom, rank)``.
    """
    cells = attach_cells(sheet, point, sampler)
    return Path(sampler.kern.g.box.coords(cells))


def attach_cells(sheet: PoissonSheet, point: tuple, sampler) -> np.ndarray:
    atom, rank = int(point[0]), int(point[1])
    space = sampler.kern.space
    if atom == space.theta:
        raise NoPathError("the extra atom carries no path")
    key = (atom, rank)
    cells = sheet.paths.get(key)
    if cells is None:
        i, j = divmod(atom, space.n_cols)
        cells, _ = sampler.sample_cells(i, j, sheet.path_rng(atom, rank))
        cells.setflags(write=False)
        sheet.paths[key] = cells
    return cells


def export_csv(state, path, space=None) -> None:
    """Write ``atom, w0, y0, G`` rows (coordinates joined by spaces)."""
    G = state.g_accum_full()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["atom", "w0", "y0", "G"])
        for a in range(len(G)):
            if space is None:
                wr.writerow([a, "", "", repr(float(G[a]))])
                continue
            p = space.pair(a)
            if p is THETA:
                wr.writerow([a, "THETA", "THETA", repr(float(G[a]))])
            else:
                wr.writerow([a, " ".join(map(str, p[0])), " ".join(map(str, p[1])), repr(float(G[a]))])


# ---------------------------------------------------------------------------
# factored engine


@njit(cache=True)
def _run_max(x, starts):
    out = np.empty(starts.shape[0] - 1)
    for r in range(starts.shape[0] - 1):
        m = 0.0
        for i in range(starts[r], starts[r + 1]):
            if x[i] > m:
                m = x[i]
        out[r] = m
    return out


@njit(cache=True)
def _sync(G, K, hist_a, hist_b, synced, t, r0, r1, c0, c1, rb, cb):
    for k in range(synced[rb, cb], t):
        for i in range(r0, r1):
            ak = hist_a[k, i]
            if ak == 0.0:
                continue
            for j in range(c0, c1):
                G[i, j] += ak * hist_b[k, j] * K[i, j]
    synced[rb, cb] = t


@njit(cache=True)
def _block_emin(G, nxt, n_cols, r0, r1, c0, c1):
    m = np.inf
    for i in range(r0, r1):
        for j in range(c0, c1):
            e = nxt[i * n_cols + j] - G[i, j]
            if e < m:
                m = e
    return m


@njit(cache=True)
def _visit(c, a, b, K, nxt, G, rs, cs, Emin, pend, synced, hist_a, hist_b, t, rb, cb, best, best_atom):
    n_cols = K.shape[1]
    r0, r1, c0, c1 = rs[rb], rs[rb + 1], cs[cb], cs[cb + 1]
    _sync(G, K, hist_a, hist_b, synced, t, r0, r1, c0, c1, rb, cb)
    emin = np.inf
    for i in range(r0, r1):
        ca = c * a[i]
        for j in range(c0, c1):
            atom = i * n_cols + j
            e = nxt[atom] - G[i, j]
            if e < emin:
                emin = e
            gv = ca * K[i, j] * b[j]
            if gv > 0.0:
                r = e / gv
                if r < best or (r == best and atom < best_atom):
                    best = r
                    best_atom = atom
    Emin[rb, cb] = emin
    pend[rb, cb] = 0.0
    return best, best_atom


@njit(cache=True)
def _scan(c, a, b, K, nxt, G, rs, cs, Kmax, Emin, pend, synced, hist_a, hist_b, t,
          best, best_atom):
    nRB = rs.shape[0] - 1
    nCB = cs.shape[0] - 1
    amax = _run_max(a, rs)
    bmax = _run_max(b, cs)
    gub = np.empty((nRB, nCB))
    tlb = np.empty(nRB * nCB)
    for rb in range(nRB):
        for cb in range(nCB):
            u = c * amax[rb] * bmax[cb] * Kmax[rb, cb]
            gub[rb, cb] = u
            if u > 0.0:
                e = Emin[rb, cb] - pend[rb, cb]
                if e < 0.0:
                    e = 0.0
                tlb[rb * nCB + cb] = e / u
            else:
                tlb[rb * nCB + cb] = np.inf
    scanned = 0
    # visit the most promising rectangle first, then every rectangle whose
    # bound still beats the best ratio, in increasing bound order
    first = np.argmin(tlb)
    if tlb[first] <= best and tlb[first] < np.inf:
        best, best_atom = _visit(c, a, b, K, nxt, G, rs, cs, Emin, pend, synced, hist_a, hist_b,
                                 t, first // nCB, first % nCB, best, best_atom)
        tlb[first] = np.inf
        scanned += 1
    cand = np.nonzero(tlb <= best)[0]
    order = cand[np.argsort(tlb[cand])]
    for q in range(order.shape[0]):
        blk = order[q]
        if tlb[blk] > best:
            break
        best, best_atom = _visit(c, a, b, K, nxt, G, rs, cs, Emin, pend, synced, hist_a, hist_b,
                                 t, blk // nCB, blk % nCB, best, best_atom)
        scanned += 1
    return best, best_atom, gub, scanned


@njit(cache=True)
def _add_pending(pend, gub, xi):
    nRB, nCB = pend.shape
    for rb in range(nRB):
        for cb in range(nCB):
            pend[rb, cb] += xi * gub[rb, cb]


class FactoredSltState:
    """Soft local time for product-form densities on ``rows x cols`` plus one atom.

    The density of a step is ``c * a[i] * K[i, j] * b[j]`` on atom
    ``i * n_cols + j`` and ``theta`` on the extra atom (the last index).
    ``K`` is fixed; ``row_starts`` and ``col_starts`` cut rows and columns
    into runs whose products form the pruning rectangles.

    For every rectangle the state keeps a lower bound ``Emin - pend`` on the
    gap between the next unused height and ``G``: ``Emin`` is exact at the
    last visit, ``pend`` adds up the largest possible rise since then.
    ``G`` inside a rectangle is only brought up to date when the rectangle
    is visited.
    """

    def __init__(self, sheet: PoissonSheet, K: np.ndarray, row_starts, col_starts,
                 Kmax: np.ndarray | None = None, kern=None):
        self.sheet = sheet
        self.K = np.ascontiguousarray(K, dtype=np.float64)
        self.n_rows, self.n_cols = self.K.shape
        if sheet.space.size != self.n_rows * self.n_cols + 1:
            raise ValueError("sheet size does not match the factored atom grid")
        self.rs = np.asarray(row_starts, dtype=np.int64)
        self.cs = np.asarray(col_starts, dtype=np.int64)
        self.Kmax = factored_block_max(self.K, self.rs, self.cs) if Kmax is None else Kmax
        self.kern = kern
        self.theta = self.n_rows * self.n_cols
        self._next = sheet.first_heights().copy()
        self.ptr = np.zeros(sheet.space.size, dtype=np.int64)
        self.G = np.zeros((self.n_rows, self.n_cols))
        self.g_theta = 0.0
        nb = (len(self.rs) - 1, len(self.cs) - 1)
        self.synced = np.zeros(nb, dtype=np.int64)
        self.pend = np.zeros(nb)
        self.Emin = np.empty(nb)
        nxt2 = self._next[: self.theta].reshape(self.n_rows, self.n_cols)
        self.Emin[:] = np.minimum.reduceat(np.minimum.reduceat(nxt2, self.rs[:-1], 0), self.cs[:-1], 1)
        self._ha = np.zeros((64, self.n_rows))
        self._hb = np.zeros((64, self.n_cols))
        self.history: list[Step] = []
        self.chosen = []
        self._theta_steps = []
        self.scanned = 0

    @property
    def steps(self) -> int:
        return len(self.history)

    def step_source(self, wi: int, yi: int):
        from .endpoint_densities import density_factors

        c, a, b, th = density_factors(self.kern, wi, yi)
        return self.step(c, a, b, th, density_id=(wi, yi))

    def step(self, c: float, a, b, theta: float, density_id=None) -> tuple[float, int]:
        a = np.ascontiguousarray(a, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        if theta <= 0 and (c <= 0 or not (a > 0).any() or not (b > 0).any()):
            raise DegenerateDensityError("density vanishes identically")
        t = len(self.history)
        best, best_atom = np.inf, -1
        if theta > 0:
            best, best_atom = (self._next[self.theta] - self.g_theta) / theta, self.theta
        best, best_atom, gub, n = _scan(c, a, b, self.K, self._next, self.G, self.rs, self.cs,
                                         self.Kmax, self.Emin, self.pend, self.synced,
                                         self._ha, self._hb, t, best, best_atom)
        self.scanned += n
        xi = float(best)
        chosen = int(best_atom)
        if chosen < 0:
            raise DegenerateDensityError("no atom can be reached")
        if t == len(self._ha):
            self._ha = np.concatenate([self._ha, np.zeros_like(self._ha)])
            self._hb = np.concatenate([self._hb, np.zeros_like(self._hb)])
        self._ha[t] = (xi * c) * a
        self._hb[t] = b
        _add_pending(self.pend, gub, xi)
        self.g_theta += xi * theta
        self._theta_steps.append(xi * theta)
        self.history.append(Step(xi, chosen, density_id))
        self.chosen.append(chosen)
        if chosen == self.theta:
            self.g_theta = self._next[chosen]
        else:
            i, j = divmod(chosen, self.n_cols)
            rb = int(np.searchsorted(self.rs, i, side="right") - 1)
            cb = int(np.searchsorted(self.cs, j, side="right") - 1)
            r0, r1, c0, c1 = self.rs[rb], self.rs[rb + 1], self.cs[cb], self.cs[cb + 1]
            _sync(self.G, self.K, self._ha, self._hb, self.synced, t + 1, r0, r1, c0, c1, rb, cb)
            self.G[i, j] = self._next[chosen]
        self.ptr[chosen] += 1
        self._next[chosen] = self.sheet.height(chosen, int(self.ptr[chosen]))
        if chosen != self.theta:
            self.Emin[rb, cb] = _block_emin(self.G, self._next, self.n_cols, r0, r1, c0, c1)
            self.pend[rb, cb] = 0.0
        return xi, chosen

    def pair_g(self, upto: int | None = None) -> np.ndarray:
        """``G`` on the grid after the first ``upto`` steps (all by default)."""
        t = len(self.history) if upto is None else int(upto)
        return (self._ha[:t].T @ self._hb[:t]) * self.K

    def theta_g(self, upto: int | None = None) -> float:
        t = len(self.history) if upto is None else int(upto)
        if t == len(self.history):
            return float(self.g_theta)
        return float(sum(self._theta_steps[:t]))

    def g_accum_full(self) -> np.ndarray:
        return np.append(self.pair_g().ravel(), self.g_theta)

    def used_points(self, upto: int | None = None) -> list:
        seen: dict[int, int] = {}
        out = []
        for a in self.chosen[: (len(self.chosen) if upto is None else upto)]:
            k = seen.get(a, 0)
            out.append((a, k))
            seen[a] = k + 1
        return out


def factored_block_max(K: np.ndarray, rs, cs) -> np.ndarray:
    return np.maximum.reduceat(np.maximum.reduceat(K, rs[:-1], 0), cs[:-1], 1)


def endpoint_state(kern, seed: int) -> FactoredSltState:
    """Factored state on the endpoint atoms of a geometry with a fresh sheet."""
    sp = kern.space
    sheet = PoissonSheet(AtomSpace.unit(sp.size), seed)
    Kmax = getattr(kern, "_kmax", None)
    if Kmax is None:
        Kmax = factored_block_max(kern.kg, sp.row_starts, sp.col_starts)
        kern._kmax = Kmax
    return FactoredSltState(sheet, kern.kg, sp.row_starts, sp.col_starts, Kmax, kern)


def shared_state(other: FactoredSltState) -> FactoredSltState:
    """A second factored state on the same sheet as ``other``."""
    return FactoredSltState(other.sheet, other.K, other.rs, other.cs, other.Kmax, other.kern)


__all__ = [
    "AtomSpace", "DegenerateDensityError", "DominanceResult", "FactoredSltState", "NoPathError",
    "PoissonSheet", "SheetMismatchError", "SltState", "Step", "attach_cells", "attach_path",
    "dominance_certificate", "endpoint_state", "export_csv", "run_slt", "shared_state", "slt_step",
]
