import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from sltlab.geometry import FiniteSet, ball, centered_cube, outer_boundary
from sltlab.potential import (CapacityInputError, HittingKernel, capacity, continuum_green,
                              dirichlet_hitting, equilibrium_measure, free_green, green_mc,
                              green_table, killed_green, return_probability, sample_equilibrium)

G0 = 1.516386059151978  # Watson's integral for the simple cubic lattice

small_sets = st.lists(st.tuples(*[st.integers(-3, 3)] * 3), min_size=1, max_size=12, unique=True)


def test_green_at_origin_and_neighbour():
    g = green_table(3)
    assert g((0, 0, 0)) == pytest.approx(G0, abs=1e-8)
    # first-step decomposition at the origin: G(0) = 1 + G(e1)
    assert g((1, 0, 0)) == pytest.approx(G0 - 1, abs=1e-8)


def test_green_lattice_symmetry():
    g = green_table(3)
    x = (3, 1, 2)
    base = g(x)
    for perm in itertools.permutations(x):
        for signs in itertools.product((1, -1), repeat=3):
            assert g(tuple(s * c for s, c in zip(signs, perm))) == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("x", [(3, 1, 0), (1, 1, 1), (5, 2, 4), (12, 0, 0)])
def test_green_harmonic_off_origin(x):
    assert abs(green_table(3).harmonicity_residual(x)) < 1e-6


def test_green_far_field():
    for k in (20, 40):
        assert free_green((k, 0, 0)) == pytest.approx(float(continuum_green(k)), rel=0.01)
    assert float(continuum_green(1.0)) == pytest.approx(3 / (2 * np.pi))


def test_green_mc_oracle_small_run():
    offs = [(0, 0, 0), (1, 0, 0), (1, 1, 1)]
    est, se = green_mc(offs, 200_000, 8.0, np.random.default_rng(0))
    exact = green_table(3).values(offs)
    assert np.all(np.abs(est - exact) <= 5 * se + 2e-3)


def test_dirichlet_single_point_domain():
    dom = FiniteSet([(0, 0, 0)])
    nb = outer_boundary(dom)
    e1 = FiniteSet([(1, 0, 0)])
    rest = FiniteSet([p for p in nb if p != (1, 0, 0)])
    assert dirichlet_hitting(dom, [e1, rest], (0, 0, 0)) == pytest.approx([1 / 6, 5 / 6])
    pm = FiniteSet([(1, 0, 0), (-1, 0, 0)])
    other = FiniteSet([p for p in nb if p not in pm])
    assert dirichlet_hitting(dom, [pm, other], (0, 0, 0)) == pytest.approx([1 / 3, 2 / 3])
    # starting on an absorbing class is immediate
    assert dirichlet_hitting(dom, [e1, rest], (1, 0, 0)) == [1.0, 0.0]


def test_dirichlet_rejects_bad_partition():
    dom = FiniteSet([(0, 0, 0)])
    with pytest.raises(ValueError):
        dirichlet_hitting(dom, [FiniteSet([(1, 0, 0)])], (0, 0, 0))
    nb = outer_boundary(dom)
    with pytest.raises(ValueError):
        dirichlet_hitting(dom, [nb], (5, 5, 5))


def test_dirichlet_lu_matches_cg():
    dom = ball(5)
    nb = outer_boundary(dom)
    top = FiniteSet([p for p in nb if p[2] > 0])
    rest = FiniteSet([p for p in nb if p[2] <= 0])
    a = dirichlet_hitting(dom, [top, rest], (0, 0, 2), method="lu")
    b = dirichlet_hitting(dom, [top, rest], (0, 0, 2), method="cg")
    assert a == pytest.approx(b, abs=1e-8)
    assert a[0] > 0.5


def test_killed_green_small_domains():
    kg = killed_green(FiniteSet([(0, 0, 0)]))
    assert kg.entry((0, 0, 0), (0, 0, 0)) == pytest.approx(1.0)
    # two sites: each returns through the other with probability 1/36
    kg2 = killed_green(FiniteSet([(0, 0, 0), (1, 0, 0)]))
    assert kg2.entry((0, 0, 0), (0, 0, 0)) == pytest.approx(36 / 35)
    assert kg2.entry((0, 0, 0), (1, 0, 0)) == pytest.approx(6 / 35)


def test_killed_green_symmetric_and_below_free():
    dom = ball(4)
    M = killed_green(dom).dense()
    assert np.allclose(M, M.T, atol=1e-10)
    free = green_table(3).matrix(dom.points)
    assert np.all(M <= free + 1e-9)


def test_capacity_point_and_pair():
    cap0, err = capacity(FiniteSet([(0, 0, 0)]))
    assert cap0 == pytest.approx(1 / G0, abs=1e-8)
    assert cap0 == pytest.approx(0.6595, abs=1e-4)
    assert err < 1e-6
    pair, _ = capacity(FiniteSet([(0, 0, 0), (1, 0, 0)]))
    assert pair == pytest.approx(2 / (2 * G0 - 1), abs=1e-8)
    assert capacity(FiniteSet.empty())[0] == 0.0


def test_capacity_methods_agree_on_pair():
    A = FiniteSet([(0, 0, 0), (3, 0, 0)])
    exact, _ = capacity(A)
    mc, se = capacity(A, "mc_escape", rng=np.random.default_rng(5), rel_tol=0.005)
    assert abs(mc - exact) <= max(0.01 * exact, 3 * se)


def test_capacity_errors():
    with pytest.raises(CapacityInputError):
        capacity(FiniteSet.empty(), "mc_escape", rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        capacity(FiniteSet([(0, 0, 0)]), "mc_escape")
    with pytest.raises(ValueError):
        capacity(FiniteSet([(0, 0, 0)]), "guess")


def test_equilibrium_measure_of_cube():
    cube = centered_cube(2)
    m = equilibrium_measure(cube)
    assert abs(m.weight((0, 0, 0))) < 1e-9
    assert np.all(m.weights > -1e-9)
    assert m.total == pytest.approx(capacity(cube)[0])


def test_equilibrium_sampling_matches_weights():
    A = FiniteSet([(0, 0, 0), (1, 0, 0), (0, 1, 0), (4, 0, 0)])
    m = equilibrium_measure(A)
    draws = sample_equilibrium(A, np.random.default_rng(7), size=40000, measure=m)
    idx = [A.index_of(tuple(p)) for p in draws]
    counts = np.bincount(idx, minlength=len(A))
    assert stats.chisquare(counts, m.normalized * counts.sum()).pvalue > 0.01


def test_hitting_kernel_sums_to_return_probability():
    A = FiniteSet([(0, 0, 0), (1, 0, 0), (0, 0, 2)])
    hk = HittingKernel(A)
    xs = np.array([(5, 0, 0), (3, 3, 3), (-2, 1, 0)])
    law = hk.law(xs)
    for x, row in zip(xs, law):
        assert row.sum() == pytest.approx(return_probability(x, A), abs=1e-10)
    assert return_probability((0, 0, 0), FiniteSet.empty()) == 0.0


@given(small_sets, small_sets)
def test_capacity_monotone_and_subadditive(a, b):
    A = FiniteSet(a)
    B = FiniteSet(b)
    union = FiniteSet(sorted(set(a) | set(b)))
    ca, cb, cu = capacity(A)[0], capacity(B)[0], capacity(union)[0]
    assert cu >= max(ca, cb) - 1e-9
    assert cu <= ca + cb + 1e-9
