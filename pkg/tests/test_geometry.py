import numpy as np
import pytest
from hypothesis import given, strategies as st

from sltlab.geometry import (A1, DA2, V, FiniteSet, GeometryError, SizeError, ball, boundary,
                             build_geometry, centered_cube, distances, inner_ball_witnesses,
                             outer_boundary)
from sltlab.potential import capacity

small_sets = st.lists(st.tuples(*[st.integers(-3, 3)] * 3), min_size=0, max_size=25)


def test_ball_r2_has_27_points():
    # |x| < 2 contains the 12 points with |x|^2 = 2 and the 8 with |x|^2 = 3
    g = build_geometry("ball", 2, 1)
    assert len(g.a1) == 27
    assert len(ball(2)) == 27
    assert (0, 0, 0) in g.a1 and (1, 1, 1) in g.a1 and (2, 0, 0) not in g.a1


def test_boundary_examples():
    assert boundary(FiniteSet([(0, 0, 0)])) == FiniteSet([(0, 0, 0)])
    cube = centered_cube(2)
    assert len(cube) == 27
    bd = boundary(cube)
    assert len(bd) == 26 and (0, 0, 0) not in bd
    assert len(boundary(FiniteSet.empty())) == 0


def test_distances_examples():
    assert distances((0, 0, 0), (1, 0, 0)) == (1.0, 1)
    e, m = distances((0, 0, 0), (1, 1, 1))
    assert e == pytest.approx(np.sqrt(3)) and m == 1
    assert distances((4, -2, 7), (4, -2, 7)) == (0.0, 0)
    with pytest.raises(GeometryError):
        distances((0, 0, 0), (0, 0))


@given(small_sets)
def test_boundary_inside_and_touching_outside(pts):
    A = FiniteSet(pts, 3) if pts else FiniteSet.empty()
    bd = boundary(A)
    assert bd.issubset(A)
    out = outer_boundary(A)
    for p in bd:
        nbrs = [tuple(np.add(p, e)) for e in np.vstack([np.eye(3, dtype=int), -np.eye(3, dtype=int)])]
        assert any(q not in A for q in nbrs)
    for p in A:
        if p not in bd:
            assert all(tuple(np.add(p, e)) in A for e in np.vstack([np.eye(3, dtype=int), -np.eye(3, dtype=int)]))
    assert not any(p in A for p in out)


@given(st.tuples(*[st.integers(-50, 50)] * 3), st.tuples(*[st.integers(-50, 50)] * 3))
def test_distance_symmetry_and_norm_order(x, y):
    e1, m1 = distances(x, y)
    e2, m2 = distances(y, x)
    assert (e1, m1) == (e2, m2)
    assert m1 <= e1 + 1e-12 <= np.sqrt(3) * m1 + 1e-9


@pytest.mark.parametrize("shape,r,s", [("ball", 6, 2), ("ball", 10, 4), ("smoothed_cube", 9, 3)])
def test_geometry_invariants(shape, r, s):
    g = build_geometry(shape, r, s)
    lab = g.box.labels
    assert not any(p in g.a1 for p in g.v)
    assert g.separated()
    assert g.a1.issubset(g.a2_complement) and g.v.issubset(g.a2_complement)
    assert not any(p in g.a2_complement for p in g.boundary_a2)
    assert (lab[g.box.flat(g.v.points)] & V).all()
    assert (lab[g.box.flat(g.a1.points)] & A1).all()
    assert (lab[g.box.flat(g.boundary_a2.points)] & DA2).all()


def test_ball_definition_by_distance():
    g = build_geometry("ball", 6, 2)
    n2 = (g.a1.points**2).sum(1)
    assert (n2 < 36).all()
    assert len(g.a1) == len(ball(6))


def test_smoothed_cube_inner_balls():
    g = build_geometry("smoothed_cube", 9, 3)
    assert inner_ball_witnesses(g).all()


def test_deterministic():
    a = build_geometry("ball", 6, 2)
    b = build_geometry("ball", 6, 2)
    assert a.v == b.v and a.a2_complement == b.a2_complement
    assert np.array_equal(a.box.labels, b.box.labels)


def test_parameter_errors():
    with pytest.raises(GeometryError):
        build_geometry("ball", 4, 4)
    with pytest.raises(GeometryError):
        build_geometry("ball", 4, 2, d=2)
    with pytest.raises(GeometryError):
        build_geometry("torus", 4, 2)
    with pytest.raises(SizeError, match="a2_complement"):
        build_geometry("ball", 30, 5, max_points=1000)


def test_capacity_of_v_grows_like_r_to_d_minus_2():
    rs = np.array([4, 6, 8, 10])
    caps = [capacity(build_geometry("ball", int(r), 1).v)[0] for r in rs]
    slope = np.polyfit(np.log(rs), np.log(caps), 1)[0]
    assert abs(slope - 1.0) <= 0.3
