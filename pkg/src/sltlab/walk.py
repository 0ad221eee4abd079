"""Simple random walk primitives: stopped runs, excursions, bridges, returns."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .geometry import A1, DA2, V, FiniteSet, GeometryTriple, neighbor_offsets
from .potential import (DomainOperator, EquilibriumMeasure, GreenTable, HittingKernel,
                        OracleError, green_table)

DEFAULT_STEP_CAP = 10**8


class Theta:
    """Marker for an excursion that never enters ``a1``."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "THETA"


THETA = Theta()


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream)``."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    def child(self, *keys: int) -> "RngStream":
        ss = np.random.SeedSequence([self.seed, self.stream, *keys])
        return RngStream(self.seed, int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1)))


def kernel_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**62))


class StepCapExceeded(RuntimeError):
    def __init__(self, partial: "Path"):
        super().__init__(f"step cap exceeded after {len(partial) - 1} steps")
        self.partial = partial


class SupportError(ValueError):
    """The requested conditioning event has probability zero."""


@dataclass
class Path:
    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        if self.vertices.ndim != 2 or len(self.vertices) == 0:
            raise ValueError("a path needs at least one vertex")
        steps = np.abs(np.diff(self.vertices, axis=0)).sum(axis=1)
        if (steps != 1).any():
            raise ValueError("consecutive vertices must be nearest neighbours")

    def __len__(self) -> int:
        return len(self.vertices)

    def __getitem__(self, k):
        return tuple(int(c) for c in self.vertices[k])

    def to_json(self) -> list:
        return self.vertices.tolist()


def run_until(start: Sequence[int], stop: Callable[[tuple], bool], step_cap: int,
              rng: np.random.Generator) -> Path:
    """Walk from ``start`` until ``stop`` holds; the path ends at that vertex."""
    if step_cap <= 0:
        raise ValueError("step_cap must be positive")
    x = np.array(start, dtype=np.int64)
    offs = neighbor_offsets(len(x))
    verts = [x.copy()]
    if stop(tuple(int(c) for c in x)):
        return Path(np.array(verts))
    draws = rng.integers(0, len(offs), size=min(step_cap, 4096))
    for k in range(step_cap):
        if k and k % len(draws) == 0:
            draws = rng.integers(0, len(offs), size=min(step_cap - k, 4096))
        x = x + offs[draws[k % len(draws)]]
        verts.append(x.copy())
        if stop(tuple(int(c) for c in x)):
            return Path(np.array(verts))
    raise StepCapExceeded(Path(np.array(verts)))


def run_until_label(g: GeometryTriple, start: Sequence[int], bits: int, rng: np.random.Generator,
                    step_cap: int = DEFAULT_STEP_CAP) -> Path:
    """Compiled ``run_until`` whose stopping set is given by label bits of ``g``."""
    flat = int(g.box.flat(np.asarray(start)[None])[0])
    cells, fail = _kernels.walk_until_label(g.box.labels, g.box.strides, flat, bits,
                                            step_cap, kernel_seed(rng))
    p = Path(g.box.coords(cells))
    if fail:
        raise StepCapExceeded(p)
    return p


@dataclass
class ExcursionRecord:
    path: Path
    d_times: list
    r_times: list
    endpoint_pairs: list = field(default_factory=list)

    def segments(self) -> list:
        """Half-open pieces ``[D_{k-1}, R_k)``, ``[R_k, D_k)``, ... covering the path."""
        cuts = sorted(set(self.d_times) | set(self.r_times) | {0})
        cuts = [c for c in cuts if c < len(self.path)] + [len(self.path)]
        return [self.path.vertices[a:b] for a, b in zip(cuts[:-1], cuts[1:])]


def excursion_decompose(path: Path, g: GeometryTriple) -> ExcursionRecord:
    """Split a path started in ``v`` into its ``v``-to-outer-boundary excursions."""
    lab = g.box.labels[g.box.flat(path.vertices)]
    if not lab[0] & V:
        raise ValueError("path must start in v")
    d_times, r_times, pairs = [0], [], []
    looking_for_exit = True
    for t in range(1, len(lab)):
        if looking_for_exit and lab[t] & DA2:
            r_times.append(t)
            seg = lab[d_times[-1]:t]
            a = np.nonzero(seg & A1)[0]
            if len(a) == 0:
                pairs.append(THETA)
            else:
                v = np.nonzero(seg & V)[0]
                w0 = path[d_times[-1] + a[0]]
                y0 = path[d_times[-1] + v[-1]]
                pairs.append((w0, y0))
            looking_for_exit = False
        elif not looking_for_exit and lab[t] & V:
            d_times.append(t)
            looking_for_exit = True
    return ExcursionRecord(path, d_times, r_times, pairs)


class ExitBridgeSampler:
    """Walks from points of ``v`` conditioned to leave ``a2_complement`` at ``y``.

    ``h(x) = P_x[X_{H} = y]`` with ``H`` the hitting time of the outer
    boundary is obtained from one Dirichlet solve, and the walk moves to a
    neighbour with probability proportional to ``h``.
    """

    def __init__(self, g: GeometryTriple, y: Sequence[int], op: DomainOperator | None = None):
        self.g = g
        self.y = tuple(int(c) for c in y)
        if self.y not in g.boundary_a2:
            raise ValueError("exit point must lie on the outer boundary")
        op = op or DomainOperator(g.a2_complement)
        h = op.solve(np.asarray(op.coupling(np.asarray(self.y)[None]).todense()).ravel())
        grid = np.zeros(g.box.size)
        grid[g.box.flat(g.a2_complement.points)] = h
        self._yflat = int(g.box.flat(np.asarray(self.y)[None])[0])
        grid[self._yflat] = 1.0
        self.h = grid

    def exit_probability(self, w) -> float:
        return float(self.h[self.g.box.flat(np.asarray(w)[None])[0]])

    def sample_cells(self, w, rng: np.random.Generator, step_cap: int = DEFAULT_STEP_CAP) -> np.ndarray:
        wf = int(self.g.box.flat(np.asarray(w)[None])[0])
        if self.h[wf] <= 0.0:
            raise SupportError(f"walk from {tuple(w)} cannot leave at {self.y}")
        cells, fail = _kernels.h_walk(self.h, self.g.box.strides, wf, self._yflat, 1.0,
                                      step_cap, kernel_seed(rng))
        if fail:
            raise StepCapExceeded(Path(self.g.box.coords(cells)))
        return cells

    def sample(self, w, rng: np.random.Generator, step_cap: int = DEFAULT_STEP_CAP) -> Path:
        return Path(self.g.box.coords(self.sample_cells(w, rng, step_cap)))


def sample_exit_bridge(w, y, g: GeometryTriple, rng: np.random.Generator,
                       sampler: ExitBridgeSampler | None = None) -> Path:
    """Path from ``w`` to its first outer-boundary hit, conditioned to hit at ``y``."""
    if tuple(w) not in g.v:
        raise ValueError("bridge start must lie in v")
    sampler = sampler or ExitBridgeSampler(g, y)
    return sampler.sample(w, rng)


@dataclass
class ReturnDecision:
    returned: bool
    point: tuple | None
    p_return: float


def decide_return_to(x, target: FiniteSet, eq_measure: EquilibriumMeasure | None,
                     rng: np.random.Generator, *, kernel: HittingKernel | None = None,
                     green: GreenTable | None = None, exact_point: bool = True) -> ReturnDecision:
    """Decide whether a walk at ``x`` ever reaches ``target``, and where.

    The return probability is the last-exit sum ``sum_y G(x, y) e(y)``.  With
    ``exact_point`` the entrance point is drawn from the exact hitting law
    from ``x``; otherwise from the normalised equilibrium measure.
    """
    if len(target) == 0:
        return ReturnDecision(False, None, 0.0)
    green = green or green_table(target.d)
    eq = eq_measure if eq_measure is not None else (kernel.measure if kernel else None)
    if eq is None:
        kernel = HittingKernel(target, green)
        eq = kernel.measure
    g = green.matrix(np.asarray(x)[None, :], target.points)[0]
    p = float(g @ eq.weights)
    if p > 1 + 1e-9:
        raise OracleError(f"return probability {p} exceeds one")
    p = min(p, 1.0)
    if rng.random() >= p:
        return ReturnDecision(False, None, p)
    if exact_point:
        kernel = kernel or HittingKernel(target, green)
        law = kernel.law(np.asarray(x)[None, :])[0]
    else:
        law = np.clip(eq.weights, 0.0, None)
    k = int(rng.choice(len(target), p=law / law.sum()))
    return ReturnDecision(True, tuple(int(c) for c in target.points[k]), p)


__all__ = [
    "THETA", "Path", "RngStream", "ExcursionRecord", "ExitBridgeSampler", "ReturnDecision",
    "StepCapExceeded", "SupportError", "decide_return_to", "excursion_decompose",
    "kernel_seed", "run_until", "run_until_label", "sample_exit_bridge",
]
