"""Lattice sets for the coupling experiments.

A geometry consists of an inner set ``a1`` (a discrete ball or a smoothed
hypercube), the shell ``v`` at distance ``s`` around it, and the region
``a2_complement`` of points within distance ``2s`` of ``a1``.  Everything is
laid out on a padded cubic box so that walks can be simulated with flat
integer indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_MAX_POINTS = 2_000_000

# bit flags stored in Box.labels
A1 = 1
U = 2
V = 4
A2C = 8
DA2 = 16
DA1 = 32


class GeometryError(ValueError):
    """Invalid geometry parameters."""


class SizeError(GeometryError):
    """Requested geometry exceeds the configured point budget."""


def _as_points(points, d=None) -> np.ndarray:
    arr = np.asarray(points, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, d or 3), dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if d is not None and arr.shape[1] != d:
        raise GeometryError(f"expected points of dimension {d}, got {arr.shape[1]}")
    return arr


class FiniteSet:
    """Finite set of lattice points with a stable sorted order.

    Points are kept as an ``(n, d)`` integer array sorted lexicographically,
    which fixes the index of every member.
    """

    def __init__(self, points, d: int | None = None):
        arr = _as_points(points, d)
        if d is None:
            d = arr.shape[1]
        if len(arr):
            arr = np.unique(arr, axis=0)
        self.points = arr.reshape(-1, d)
        self.points.setflags(write=False)
        self.d = d

    @classmethod
    def empty(cls, d: int = 3) -> "FiniteSet":
        return cls(np.zeros((0, d), dtype=np.int64), d)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return (tuple(int(c) for c in p) for p in self.points)

    def __contains__(self, x) -> bool:
        return tuple(int(c) for c in x) in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiniteSet):
            return NotImplemented
        return self.d == other.d and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.d, self.points.tobytes()))

    def __repr__(self) -> str:
        return f"FiniteSet(n={len(self)}, d={self.d})"

    @cached_property
    def _index(self) -> dict:
        return {tuple(int(c) for c in p): i for i, p in enumerate(self.points)}

    def index_of(self, x) -> int:
        """Position of ``x`` in the sorted order, raising ``KeyError`` if absent."""
        return self._index[tuple(int(c) for c in x)]

    def union(self, other: "FiniteSet") -> "FiniteSet":
        return FiniteSet(np.vstack([self.points, other.points]), self.d)

    def issubset(self, other: "FiniteSet") -> bool:
        return all(p in other._index for p in self)

    def tolist(self) -> list:
        return self.points.tolist()


def neighbor_offsets(d: int) -> np.ndarray:
    """The ``2d`` unit vectors, ordered ``+e1, -e1, +e2, -e2, ...``."""
    off = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        off[2 * i, i] = 1
        off[2 * i + 1, i] = -1
    return off


def boundary(A: FiniteSet) -> FiniteSet:
    """Points of ``A`` having at least one nearest neighbour outside ``A``."""
    if len(A) == 0:
        return FiniteSet.empty(A.d)
    lo = A.points.min(axis=0) - 1
    shape = tuple(A.points.max(axis=0) - lo + 2)
    mask = np.zeros(shape, dtype=bool)
    mask[tuple((A.points - lo).T)] = True
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(A.d, 1))
    keep = ~inner[tuple((A.points - lo).T)]
    return FiniteSet(A.points[keep], A.d)


def outer_boundary(A: FiniteSet) -> FiniteSet:
    """Points outside ``A`` adjacent to ``A``."""
    if len(A) == 0:
        return FiniteSet.empty(A.d)
    nb = (A.points[:, None, :] + neighbor_offsets(A.d)[None]).reshape(-1, A.d)
    nb = np.unique(nb, axis=0)
    keep = np.array([tuple(p) not in A._index for p in nb.tolist()], dtype=bool)
    return FiniteSet(nb[keep], A.d)


def distances(x: Sequence[int], y: Sequence[int]) -> tuple[float, int]:
    """Euclidean and sup-norm distance between two lattice points."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape != y.shape:
        raise GeometryError(f"dimension mismatch: {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.sqrt(np.dot(diff, diff))), int(np.abs(diff).max(initial=0))


def ball(radius: float, d: int = 3, strict: bool = True) -> FiniteSet:
    """Discrete Euclidean ball around the origin."""
    R = int(np.floor(radius))
    ax = np.arange(-R, R + 1)
    grid = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    n2 = (grid**2).sum(axis=1)
    keep = n2 < radius**2 if strict else n2 <= radius**2 + 1e-9
    return FiniteSet(grid[keep], d)


def centered_cube(edge: int, d: int = 3) -> FiniteSet:
    """Hypercube of the given edge length centred at the origin.

    Odd-length parity is resolved by flooring: each coordinate ranges over
    ``[-floor(edge/2), edge - floor(edge/2)]``.
    """
    lo = -(edge // 2)
    ax = np.arange(lo, lo + edge + 1)
    grid = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return FiniteSet(grid, d)


@dataclass
class Box:
    """Padded cubic box carrying membership labels and flat-index maps."""

    half: int
    d: int
    labels: np.ndarray  # flat int8 array of bit flags
    strides: np.ndarray  # flat index offsets of the 2d neighbours

    @property
    def side(self) -> int:
        return 2 * self.half + 1

    @property
    def size(self) -> int:
        return self.side**self.d

    def flat(self, pts) -> np.ndarray:
        pts = _as_points(pts, self.d) + self.half
        if (pts < 0).any() or (pts >= self.side).any():
            raise GeometryError("point outside the simulation box")
        return np.ravel_multi_index(tuple(pts.T), (self.side,) * self.d).astype(np.int64)

    def coords(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        return np.stack(np.unravel_index(flat, (self.side,) * self.d), axis=-1) - self.half

    @classmethod
    def around(cls, pts, pad: int = 2) -> "Box":
        """Unlabelled box holding ``pts`` with ``pad`` spare layers."""
        pts = np.asarray(pts, dtype=np.int64)
        d = pts.shape[1]
        half = int(np.abs(pts).max()) + pad
        return cls(half=half, d=d, labels=np.zeros((2 * half + 1) ** d, dtype=np.int8),
                   strides=_neighbor_strides(2 * half + 1, d))

    def index_map(self, pts: np.ndarray) -> np.ndarray:
        """Flat array mapping each box cell to its row in ``pts`` or -1."""
        m = np.full(self.size, -1, dtype=np.int64)
        if len(pts):
            m[self.flat(pts)] = np.arange(len(pts))
        return m


@dataclass
class GeometryTriple:
    shape: str
    r: int
    s: int
    d: int
    a1: FiniteSet
    v: FiniteSet
    a2_complement: FiniteSet
    boundary_a2: FiniteSet
    boundary_a1: FiniteSet
    u_set: FiniteSet
    box: Box = field(repr=False)

    @cached_property
    def idx_a2c(self) -> np.ndarray:
        return self.box.index_map(self.a2_complement.points)

    @cached_property
    def idx_v(self) -> np.ndarray:
        return self.box.index_map(self.v.points)

    @cached_property
    def idx_da1(self) -> np.ndarray:
        return self.box.index_map(self.boundary_a1.points)

    @cached_property
    def idx_da2(self) -> np.ndarray:
        return self.box.index_map(self.boundary_a2.points)

    def describe(self, with_points: bool = False) -> dict:
        out = {
            "shape": self.shape,
            "r": self.r,
            "s": self.s,
            "d": self.d,
            "sizes": {
                "a1": len(self.a1),
                "boundary_a1": len(self.boundary_a1),
                "v": len(self.v),
                "a2_complement": len(self.a2_complement),
                "boundary_a2": len(self.boundary_a2),
            },
        }
        if with_points:
            out["points"] = {
                "a1": self.a1.tolist(),
                "v": self.v.tolist(),
                "a2_complement": self.a2_complement.tolist(),
                "boundary_a2": self.boundary_a2.tolist(),
            }
        return out

    def separated(self) -> bool:
        """True when every nearest-neighbour path from a1 to the outer boundary meets v."""
        side = (self.box.side,) * self.d
        lab = self.box.labels.reshape(side)
        free = ((lab & (A2C | DA2)) != 0) & ((lab & V) == 0)
        comp, _ = ndimage.label(free, structure=ndimage.generate_binary_structure(self.d, 1))
        inner = np.unique(comp[(lab & A1) != 0])
        outer = np.unique(comp[(lab & DA2) != 0])
        return not np.intersect1d(inner[inner > 0], outer[outer > 0]).size


def _neighbor_strides(side: int, d: int) -> np.ndarray:
    strides = np.array([side ** (d - 1 - i) for i in range(d)], dtype=np.int64)
    out = np.empty(2 * d, dtype=np.int64)
    out[0::2] = strides
    out[1::2] = -strides
    return out


def _sq_dist_to(mask: np.ndarray) -> np.ndarray:
    dist = ndimage.distance_transform_edt(~mask)
    return np.rint(dist**2).astype(np.int64)


def build_geometry(shape: str, r: int, s: int, d: int = 3,
                   max_points: int = DEFAULT_MAX_POINTS) -> GeometryTriple:
    """Construct the nested sets for a ball or a smoothed hypercube.

    Distances to ``a1`` are Euclidean.  For the cube, ``a1`` is the set of
    points within distance ``s`` of a centred hypercube of edge ``r - s``.
    """
    if d < 3:
        raise GeometryError("dimension must be at least 3")
    if not (1 <= s < r):
        raise GeometryError(f"need 1 <= s < r, got r={r}, s={s}")
    if shape not in ("ball", "smoothed_cube"):
        raise GeometryError(f"unknown shape {shape!r}")
    reach = r if shape == "ball" else (r - s) // 2 + (r - s) % 2 + s
    half = reach + 2 * s + 3
    side = 2 * half + 1
    est = np.pi ** (d / 2) / np.exp(np.log(np.arange(1, d // 2 + 2)).sum()) * (reach + 2 * s) ** d
    if side**d > 50 * max_points or est > 2 * max_points:
        raise SizeError(f"a2_complement would hold about {int(est)} points, budget {max_points}")
    ax = np.arange(-half, half + 1)
    coords = np.meshgrid(*([ax] * d), indexing="ij")
    if shape == "ball":
        a1 = sum(c.astype(np.int64) ** 2 for c in coords) < r * r
    else:
        lo = -((r - s) // 2)
        hi = lo + (r - s)
        core = np.ones_like(coords[0], dtype=bool)
        for c in coords:
            core &= (c >= lo) & (c <= hi)
        a1 = _sq_dist_to(core) <= s * s
    d1 = _sq_dist_to(a1)
    u = d1 <= s * s
    a2c = d1 <= 4 * s * s
    n_a2c = int(a2c.sum())
    if n_a2c > max_points:
        raise SizeError(f"|a2_complement| = {n_a2c} exceeds budget {max_points}")
    st = ndimage.generate_binary_structure(d, 1)
    v = u & ~ndimage.binary_erosion(u, structure=st, border_value=0)
    da1 = a1 & ~ndimage.binary_erosion(a1, structure=st, border_value=0)
    da2 = ndimage.binary_dilation(a2c, structure=st) & ~a2c
    labels = (a1 * A1 + u * U + v * V + a2c * A2C + da2 * DA2 + da1 * DA1).astype(np.int8)

    def pts(mask):
        return np.argwhere(mask).astype(np.int64) - half

    box = Box(half=half, d=d, labels=labels.ravel(), strides=_neighbor_strides(side, d))
    return GeometryTriple(
        shape=shape, r=r, s=s, d=d,
        a1=FiniteSet(pts(a1), d), v=FiniteSet(pts(v), d),
        a2_complement=FiniteSet(pts(a2c), d), boundary_a2=FiniteSet(pts(da2), d),
        boundary_a1=FiniteSet(pts(da1), d), u_set=FiniteSet(pts(u), d), box=box,
    )


def unsmoothed_cube(r: int, s: int, d: int = 3) -> FiniteSet:
    """The plain hypercube of edge ``r + 2s`` that the smoothed ``a1`` sits inside."""
    return centered_cube(r + 2 * s, d)


def inner_ball_witnesses(g: GeometryTriple) -> np.ndarray:
    """For each boundary point of ``a1`` look for an inscribed ball reaching it.

    A point ``x`` passes when some lattice centre ``c`` has every lattice
    point within Euclidean distance ``s`` of ``c`` inside ``a1`` and ``x``
    lies on the outer lattice shell of that ball, ``s - 1 < |x - c| <= s``.
    """
    side = (g.box.side,) * g.d
    a1 = ((g.box.labels & A1) != 0).reshape(side)
    s = g.s
    ax = np.arange(-s, s + 1)
    offs = np.stack(np.meshgrid(*([ax] * g.d), indexing="ij"), axis=-1).reshape(-1, g.d)
    n2 = (offs**2).sum(1)
    shell = offs[(n2 <= s * s) & (n2 > (s - 1) ** 2)]
    # centres whose whole radius-s ball lies in a1
    footprint = (n2 <= s * s).reshape((2 * s + 1,) * g.d)
    inside = ndimage.binary_erosion(a1, structure=footprint, border_value=0)
    h = g.box.half
    out = np.zeros(len(g.boundary_a1), dtype=bool)
    for k, x in enumerate(g.boundary_a1.points):
        cands = x + h - shell
        ok = ((cands >= 0) & (cands < g.box.side)).all(1)
        out[k] = bool(inside[tuple(cands[ok].T)].any())
    return out


def points_from(iterable: Iterable, d: int = 3) -> FiniteSet:
    return FiniteSet(list(iterable), d)
