"""Entrance/exit skeletons of walks between two nested sets.

A clothesline records, for a walk started on ``v``, the successive pairs
``(W_k, Y_k)``: ``W_k`` an entrance point in ``v`` and ``Y_k`` the point
where the walk next leaves ``a2_complement``.  After ``Y_k`` the walk
either comes back to ``v`` (at ``W_{k+1}``) or escapes for good, which ends
the line.  Both transitions are read off exact tables: the exit law from
the killed Green function and the return law from the free one.

:func:`sample_cloth_u` builds the same kind of skeleton for an arbitrary
pair of finite sets, for all trajectories of an interlacement at level
``u`` that meet the first set, using only free-Green hitting laws.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .endpoint_densities import EndpointKernels, kernels_for
from .geometry import FiniteSet, GeometryTriple, neighbor_offsets
from .potential import HittingKernel, equilibrium_measure


@dataclass
class ClotheslineRealization:
    """Pairs ``(W_k, Y_k)``; ``w_idx``/``y_idx`` index ``v`` (endpoint-space order) and the outer boundary."""

    pairs: list
    killed: bool
    t_delta: int
    w_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    y_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_json(self) -> str:
        return json.dumps({"pairs": [[list(w), list(y)] for w, y in self.pairs],
                           "killed": self.killed, "t_delta": self.t_delta})

    def sources(self) -> list:
        return list(zip(self.w_idx.tolist(), self.y_idx.tolist()))


class ClotheslineSampler:
    """Draws clotheslines for one geometry from its exact transition tables."""

    def __init__(self, kern: EndpointKernels):
        self.kern = kern
        self.p_ret = np.minimum(kern.p_return, 1.0)
        e = np.clip(kern.eq_v, 0.0, None)
        self.eq_cdf = np.cumsum(e) / e.sum()
        self._exit_cdf: dict[int, np.ndarray] = {}
        self._ret_cdf: dict[int, np.ndarray] = {}

    def _cdf(self, table, cache, i):
        c = cache.get(i)
        if c is None:
            row = np.clip(table[i], 0.0, None)
            c = np.cumsum(row)
            c /= c[-1]
            cache[i] = c
        return c

    @staticmethod
    def _pick(cdf, u):
        return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))

    def exit_point(self, wi: int, rng) -> int:
        return self._pick(self._cdf(self.kern.exit, self._exit_cdf, wi), rng.random())

    def return_point(self, yi: int, rng) -> int:
        """Entrance index into ``v`` after leaving at ``yi``, or -1 for escape."""
        if rng.random() >= self.p_ret[yi]:
            return -1
        return self._pick(self._cdf(self.kern.ret, self._ret_cdf, yi), rng.random())

    def start_index(self, start, rng) -> int:
        sp = self.kern.space
        if isinstance(start, str):
            if start != "equilibrium":
                raise ValueError(f"unknown start {start!r}")
            return self._pick(self.eq_cdf, rng.random())
        kind, pt = start
        if kind == "point":
            return sp.col(pt)
        if kind == "hitting":
            return self.return_point(self.kern.y_index(pt), rng)
        raise ValueError(f"unknown start {start!r}")

    def sample_indices(self, rng, start="equilibrium") -> tuple[np.ndarray, np.ndarray]:
        ws, ys = [], []
        wi = self.start_index(start, rng)
        while wi >= 0:
            yi = self.exit_point(wi, rng)
            ws.append(wi)
            ys.append(yi)
            wi = self.return_point(yi, rng)
        return np.asarray(ws, dtype=np.int64), np.asarray(ys, dtype=np.int64)

    def sample(self, rng, start="equilibrium") -> ClotheslineRealization:
        w, y = self.sample_indices(rng, start)
        sp = self.kern.space
        pairs = [(tuple(int(c) for c in sp.cols[a]), tuple(int(c) for c in self.kern.ys[b]))
                 for a, b in zip(w, y)]
        return ClotheslineRealization(pairs, True, len(pairs), w, y)


def _kernels_of(g) -> EndpointKernels:
    if isinstance(g, EndpointKernels):
        return g
    if isinstance(g, GeometryTriple):
        return kernels_for(g.shape, g.r, g.s, g.d)
    raise TypeError("expected a geometry or its endpoint kernels")


def sample_clothesline(g, start, rng: np.random.Generator,
                       sampler: ClotheslineSampler | None = None) -> ClotheslineRealization:
    """One clothesline of ``g`` from ``start``.

    ``start`` is ``"equilibrium"`` (normalised equilibrium measure of ``v``),
    ``("point", w0)`` or ``("hitting", y)`` (the walk from ``y``; an empty
    realization when it never reaches ``v``).
    """
    sampler = sampler or ClotheslineSampler(_kernels_of(g))
    return sampler.sample(rng, start)


@dataclass
class GeneralizedClothesline:
    k1: FiniteSet
    k2: FiniteSet
    traces: list
    level: float


class _Alternator:
    def __init__(self, k1: FiniteSet, k2: FiniteSet):
        self.sets = (k1, k2)
        self.kernels = (HittingKernel(k1), HittingKernel(k2))
        self.offsets = neighbor_offsets(k1.d)

    def next_visit(self, x: np.ndarray, phase: int, rng) -> np.ndarray | None:
        """First visit to set ``phase`` strictly after the current time, or ``None``."""
        target = self.sets[phase]
        nb = x + self.offsets[rng.integers(len(self.offsets))]
        if tuple(int(c) for c in nb) in target:
            return nb
        law = self.kernels[phase].law(nb[None])[0]
        p = law.sum()
        if rng.random() >= min(p, 1.0):
            return None
        return target.points[rng.choice(len(target), p=law / p)]


def sample_cloth_u(K1: FiniteSet, K2: FiniteSet, u: float, rng: np.random.Generator) -> GeneralizedClothesline:
    """Alternating ``K1``/``K2`` visit skeletons of the level-``u`` trajectories meeting ``K1``.

    Each trajectory starts from the normalised equilibrium measure of
    ``K1``; from a ``K1`` visit the next recorded point is the next visit
    to ``K2`` and vice versa, until the walk escapes.
    """
    if u < 0:
        raise ValueError("u must be nonnegative")
    eq = equilibrium_measure(K1)
    n = int(rng.poisson(u * eq.total)) if u > 0 else 0
    traces = []
    if n:
        alt = _Alternator(K1, K2)
        w = np.clip(eq.weights, 0.0, None)
        for _ in range(n):
            x = K1.points[rng.choice(len(K1), p=w / w.sum())]
            trace = [tuple(int(c) for c in x)]
            phase = 1
            while True:
                x = alt.next_visit(x, phase, rng)
                if x is None:
                    break
                trace.append(tuple(int(c) for c in x))
                phase = 1 - phase
            traces.append(trace)
    return GeneralizedClothesline(K1, K2, traces, float(u))


__all__ = [
    "ClotheslineRealization", "ClotheslineSampler", "GeneralizedClothesline",
    "sample_cloth_u", "sample_clothesline",
]
