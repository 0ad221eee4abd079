"""Random interlacements seen through a finite window.

Within a window ``W`` the interlacement at level ``u`` is the union of
``Poisson(u * cap(W))`` walks started from the normalised equilibrium
measure of ``W``.  Every trajectory here carries a uniform level in
``(0, u_max]``, so one sample serves every ``u <= u_max`` and the
occupied sets are nested in ``u``.

Walks are simulated step by step inside ``W``.  Once a walk steps out, the
time spent outside is skipped: it re-enters with probability
``P_x[H_W < inf]`` at a point drawn from the exact hitting law, both read
off the free Green function.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .geometry import Box, FiniteSet, ball, boundary, outer_boundary
from .potential import HittingKernel, equilibrium_measure
from .walk import Path, kernel_seed


class LevelRangeError(ValueError):
    pass


class WindowModel:
    """Flat-index tables for walking in ``window`` with exact re-entries."""

    def __init__(self, window: FiniteSet):
        if len(window) == 0:
            raise ValueError("empty window")
        self.window = window
        self.box = Box.around(window.points, pad=3)
        self.eq = equilibrium_measure(window)
        self.cap = self.eq.total
        w = np.clip(self.eq.weights, 0.0, None)
        self.start_cdf = np.cumsum(w) / w.sum()
        self.win = self.box.index_map(window.points)
        bd = boundary(window)
        self.ext_points = outer_boundary(window).points
        self.ext = self.box.index_map(self.ext_points)
        law = HittingKernel(bd).law(self.ext_points)
        self.p_ret = np.minimum(law.sum(axis=1), 1.0)
        self.cdf = np.cumsum(law, axis=1) / np.maximum(law.sum(axis=1), 1e-300)[:, None]
        self.cdf[:, -1] = 1.0
        self.bd_cells = self.box.flat(bd.points)
        self.cells = self.box.flat(window.points)

    def run(self, n: int, rng: np.random.Generator, bits: np.ndarray | None = None, record: bool = False):
        starts = self.cells[np.searchsorted(self.start_cdf, rng.random(n), side="right").clip(0, len(self.cells) - 1)]
        if bits is None:
            bits = np.zeros(len(self.window), dtype=np.int64)
        return _kernels.window_walks(self.win, self.ext, self.box.strides, starts, self.cdf, self.p_ret,
                                     self.bd_cells, bits, record, kernel_seed(rng))


@lru_cache(maxsize=32)
def _model(key: bytes, d: int) -> WindowModel:
    return WindowModel(FiniteSet(np.frombuffer(key, dtype=np.int64).reshape(-1, d), d))


def window_model(window: FiniteSet) -> WindowModel:
    return _model(np.ascontiguousarray(window.points, dtype=np.int64).tobytes(), window.d)


@dataclass
class Trajectory:
    """Cells visited by one walk; ``jumped[k]`` marks a re-entry jump into ``cells[k]``."""

    cells: np.ndarray
    jumped: np.ndarray
    box: Box

    def points(self) -> np.ndarray:
        return self.box.coords(self.cells)

    def segments(self) -> list:
        """Nearest-neighbour pieces between re-entry jumps."""
        cuts = [0, *np.nonzero(self.jumped)[0].tolist(), len(self.cells)]
        pts = self.points()
        return [Path(pts[a:b]) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


@dataclass
class TrajectorySoup:
    window: FiniteSet
    u_max: float
    levels: np.ndarray
    trajectories: list
    model: WindowModel

    @property
    def arrivals(self) -> list:
        return list(zip(self.levels.tolist(), self.trajectories))


@dataclass(frozen=True)
class OccupancyField:
    window: FiniteSet
    u: float
    occupied: FiniteSet


def sample_soup(window: FiniteSet, u_max: float, rng: np.random.Generator) -> TrajectorySoup:
    """All trajectories of levels up to ``u_max`` through ``window``."""
    if u_max < 0:
        raise LevelRangeError("u_max must be nonnegative")
    m = window_model(window)
    n = int(rng.poisson(u_max * m.cap)) if u_max > 0 else 0
    levels = np.sort(rng.uniform(0.0, u_max, size=n))
    _, cells, offs, jumped = m.run(n, rng, record=True)
    trajs = [Trajectory(cells[offs[k]:offs[k + 1]], jumped[offs[k]:offs[k + 1]], m.box) for k in range(n)]
    return TrajectorySoup(window, float(u_max), levels, trajs, m)


def restrict(soup: TrajectorySoup, u: float) -> OccupancyField:
    """Window points visited by trajectories of level at most ``u``."""
    if u < 0 or u > soup.u_max:
        raise LevelRangeError(f"level {u} outside [0, {soup.u_max}]")
    m = soup.model
    keep = [t.cells for lv, t in zip(soup.levels, soup.trajectories) if lv <= u]
    if not keep:
        return OccupancyField(soup.window, u, FiniteSet.empty(soup.window.d))
    cells = np.unique(np.concatenate(keep))
    cells = cells[m.win[cells] >= 0]
    return OccupancyField(soup.window, u, FiniteSet(m.box.coords(cells), soup.window.d))


def default_window(A: FiniteSet) -> FiniteSet:
    """Ball strictly larger than ``A`` so that vacancy is not decided by the count alone."""
    rho = int(np.ceil(np.sqrt((A.points.astype(float) ** 2).sum(1)).max())) + 2
    return ball(rho + 0.5, A.d, strict=True)


def hitting_levels(sets: list, u_max: float, reps: int, rng: np.random.Generator,
                   window: FiniteSet | None = None) -> np.ndarray:
    """Lowest level of a trajectory meeting each set, per independent soup.

    Returns an array ``(reps, len(sets))``; ``inf`` when no trajectory of
    level up to ``u_max`` meets the set.  ``{A vacant at u}`` is the event
    that the entry exceeds ``u``.
    """
    if len(sets) > 62:
        raise ValueError("at most 62 sets per call")
    if window is None:
        window = default_window(FiniteSet(np.concatenate([s.points for s in sets]), sets[0].d))
    m = window_model(window)
    bits = np.zeros(len(window), dtype=np.int64)
    for k, A in enumerate(sets):
        if not A.issubset(window):
            raise ValueError("every set must lie inside the window")
        for p in A.points:
            bits[window.index_of(p)] |= 1 << k
    out = np.full((reps, len(sets)), np.inf)
    if reps == 0 or u_max <= 0:
        return out
    counts = rng.poisson(u_max * m.cap, size=reps)
    levels = rng.uniform(0.0, u_max, size=int(counts.sum()))
    hit, _, _, _ = m.run(int(counts.sum()), rng, bits=bits)
    owner = np.repeat(np.arange(reps), counts)
    for k in range(len(sets)):
        sel = (hit >> k) & 1 == 1
        np.minimum.at(out[:, k], owner[sel], levels[sel])
    return out


def vacant_probability(A: FiniteSet, u: float, reps: int, rng: np.random.Generator,
                       window: FiniteSet | None = None) -> tuple[float, float]:
    """Frequency of ``A`` being untouched at level ``u`` with its binomial standard error."""
    if reps < 100:
        raise ValueError("reps must be at least 100")
    if u == 0:
        return 1.0, 0.0
    lv = hitting_levels([A], u, reps, rng, window)[:, 0]
    p = float((lv > u).mean())
    return p, float(np.sqrt(max(p * (1 - p), 1e-300) / reps))


def occupancy_covariance(x, y, u: float, reps: int, rng: np.random.Generator) -> tuple[float, float]:
    """Empirical ``Cov(1{x in I^u}, 1{y in I^u})`` with a delta-method standard error."""
    d = len(x)
    win = FiniteSet(np.array([x, y]), d)
    lv = hitting_levels([FiniteSet(np.array([x]), d), FiniteSet(np.array([y]), d)], u, reps, rng, win)
    a = (lv[:, 0] <= u).astype(float)
    b = (lv[:, 1] <= u).astype(float)
    ma, mb = a.mean(), b.mean()
    cov = float((a * b).mean() - ma * mb)
    infl = (a - ma) * (b - mb) - cov
    return cov, float(infl.std() / np.sqrt(reps))


__all__ = [
    "LevelRangeError", "OccupancyField", "Trajectory", "TrajectorySoup", "WindowModel",
    "default_window", "hitting_levels", "occupancy_covariance", "restrict", "sample_soup",
    "vacant_probability", "window_model",
]
