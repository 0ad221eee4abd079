import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from sltlab.geometry import DA2, FiniteSet, build_geometry
from sltlab.potential import capacity, green_table
from sltlab.walk import (THETA, ExitBridgeSampler, Path, RngStream, StepCapExceeded, SupportError,
                         decide_return_to, excursion_decompose, run_until, run_until_label,
                         sample_exit_bridge)


@pytest.fixture(scope="module")
def geo():
    return build_geometry("ball", 6, 2)


def line(a, b):
    """Nearest-neighbour path from a to b fixing one coordinate at a time."""
    a = np.asarray(a)
    b = np.asarray(b)
    pts = [a.copy()]
    x = a.copy()
    for i in range(3):
        while x[i] != b[i]:
            x[i] += 1 if b[i] > x[i] else -1
            pts.append(x.copy())
    return np.array(pts)


def test_rng_stream_reproducible():
    a = RngStream(7, 3).generator().random(5)
    b = RngStream(7, 3).generator().random(5)
    c = RngStream(7, 4).generator().random(5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_run_until_examples():
    rng = np.random.default_rng(0)
    assert len(run_until((0, 0, 0), lambda x: True, 10, rng)) == 1
    p = run_until((0, 0, 0), lambda x: max(map(abs, x)) >= 1, 10, rng)
    assert len(p) == 2
    with pytest.raises(StepCapExceeded) as info:
        run_until((0, 0, 0), lambda x: np.sqrt(sum(c * c for c in x)) >= 50, 10, rng)
    assert len(info.value.partial) == 11


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_run_until_stops_at_first_hit(seed, radius):
    stop = lambda x: max(map(abs, x)) >= radius  # noqa: E731
    p = run_until((0, 0, 0), stop, 10**6, np.random.default_rng(seed))
    assert stop(p[len(p) - 1])
    assert not any(stop(p[k]) for k in range(len(p) - 1))


def test_path_rejects_jumps():
    with pytest.raises(ValueError):
        Path([(0, 0, 0), (2, 0, 0)])


def test_excursion_decompose_hand_built(geo):
    v_pt = np.array([0, 0, 0])
    # a v point on the first axis: v is the shell at distance s from a1
    xs = [int(p[0]) for p in geo.v.points if p[1] == 0 and p[2] == 0 and p[0] > 0]
    v_pt = np.array([xs[0], 0, 0])
    bd = [int(p[0]) for p in geo.boundary_a2.points if p[1] == 0 and p[2] == 0 and p[0] > 0][0]
    # v -> outer boundary along the axis, never touching a1
    out = line(v_pt, (bd, 0, 0))
    rec = excursion_decompose(Path(out), geo)
    assert rec.endpoint_pairs == [THETA]
    # v -> into a1 -> back to v -> outer boundary
    a1_edge = max(int(p[0]) for p in geo.a1.points if p[1] == 0 and p[2] == 0)
    down = line(v_pt, (a1_edge, 0, 0))
    up = line((a1_edge, 0, 0), (bd, 0, 0))[1:]
    path = np.vstack([down, up])
    rec = excursion_decompose(Path(path), geo)
    last_v = max(int(p[0]) for p in geo.v.points if p[1] == 0 and p[2] == 0 and p[0] > 0)
    assert rec.endpoint_pairs == [((a1_edge, 0, 0), (last_v, 0, 0))]
    # two excursions in sequence
    back = line((bd, 0, 0), v_pt)[1:]
    rec2 = excursion_decompose(Path(np.vstack([path, back, path[1:]])), geo)
    assert rec2.endpoint_pairs == [rec.endpoint_pairs[0]] * 2
    with pytest.raises(ValueError):
        excursion_decompose(Path(line((0, 0, 0), (1, 0, 0))), geo)


@given(st.integers(0, 2**32 - 1))
def test_decomposition_round_trip(seed):
    g = build_geometry("ball", 4, 1)
    rng = np.random.default_rng(seed)
    start = g.v.points[rng.integers(len(g.v))]
    pieces = [run_until_label(g, start, DA2, rng).vertices]
    for _ in range(2):
        x = pieces[-1][-1]
        seg = line(x, (0, 0, 0))
        k = next(i for i in range(len(seg)) if tuple(seg[i]) in g.v)
        seg = seg[: k + 1]
        pieces.append(seg[1:])
        pieces.append(run_until_label(g, seg[-1], DA2, rng).vertices[1:])
    path = Path(np.vstack(pieces))
    rec = excursion_decompose(path, g)
    assert np.array_equal(np.vstack(rec.segments()), path.vertices)
    assert len(rec.endpoint_pairs) == len(rec.r_times) == 3
    for (w0, y0) in (p for p in rec.endpoint_pairs if p is not THETA):
        assert w0 in g.a1 and y0 in g.v


def test_bridge_ends_at_y_and_avoids_boundary(geo):
    rng = np.random.default_rng(1)
    w = tuple(geo.v.points[0])
    samp = None
    for y in map(tuple, geo.boundary_a2.points[:200]):
        s = ExitBridgeSampler(geo, y)
        if s.exit_probability(w) > 1e-3:
            samp = s
            break
    for _ in range(50):
        p = sample_exit_bridge(w, samp.y, geo, rng, sampler=samp)
        assert p[len(p) - 1] == samp.y
        assert not any(p[k] in geo.boundary_a2 for k in range(len(p) - 1))


def test_bridge_matches_restricted_free_walks(geo):
    # walks from w restricted to those leaving at y give the same last-v-visit law as bridges
    rng = np.random.default_rng(2)
    w = tuple(geo.v.points[len(geo.v) // 2])
    hits = {}
    free = []
    for _ in range(20000):
        p = run_until_label(geo, w, DA2, rng)
        free.append(p)
        hits[p[len(p) - 1]] = hits.get(p[len(p) - 1], 0) + 1
    y = max(hits, key=hits.get)
    kept = [p for p in free if p[len(p) - 1] == y]
    samp = ExitBridgeSampler(geo, y)
    bridged = [samp.sample(w, rng) for _ in range(len(kept) * 3)]

    def length_bin(p):
        return min(len(p) // 10, 5)

    a = np.bincount([length_bin(p) for p in kept], minlength=6)
    b = np.bincount([length_bin(p) for p in bridged], minlength=6)
    keep = (a + b) > 0
    res = stats.chi2_contingency(np.vstack([a[keep], b[keep]]))
    assert res.pvalue > 0.01


def test_bridge_zero_probability_support_error():
    g = build_geometry("ball", 4, 1)
    w = tuple(g.v.points[0])
    far = g.boundary_a2.points[np.argmax(((g.boundary_a2.points - np.array(w)) ** 2).sum(1))]
    samp = ExitBridgeSampler(g, tuple(far))
    samp.h[g.box.flat(np.asarray(w)[None])[0]] = 0.0
    with pytest.raises(SupportError):
        samp.sample(w, np.random.default_rng(0))


def test_decide_return_examples():
    rng = np.random.default_rng(3)
    origin = FiniteSet([(0, 0, 0)])
    assert not decide_return_to((5, 0, 0), FiniteSet.empty(), None, rng).returned
    green = green_table(3)
    d = decide_return_to((20, 0, 0), origin, None, rng)
    assert d.p_return == pytest.approx(green((20, 0, 0)) * capacity(origin)[0], rel=1e-9)
    ps = [decide_return_to((k, 0, 0), origin, None, rng).p_return for k in (2, 4, 8, 16, 32)]
    assert all(a > b for a, b in zip(ps, ps[1:]))


def test_return_frequency_matches_exact():
    rng = np.random.default_rng(4)
    A = FiniteSet([(0, 0, 0), (1, 0, 0)])
    x = (4, 1, 0)
    p = decide_return_to(x, A, None, rng).p_return
    n = 20000
    hits = sum(decide_return_to(x, A, None, rng).returned for _ in range(n))
    assert abs(hits / n - p) <= 3 * np.sqrt(p * (1 - p) / n)
