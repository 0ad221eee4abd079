import numpy as np
import pytest
from hypothesis import given, strategies as st

from sltlab.geometry import FiniteSet, ball
from sltlab.interlacements import (LevelRangeError, hitting_levels, occupancy_covariance, restrict,
                                   sample_soup, vacant_probability)
from sltlab.potential import capacity

WINDOW = ball(3.5, strict=True)


def test_soup_count_is_poisson():
    rng = np.random.default_rng(0)
    cap = capacity(WINDOW)[0]
    counts = np.array([len(sample_soup(WINDOW, 0.2, rng).trajectories) for _ in range(400)])
    mean = 0.2 * cap
    assert abs(counts.mean() - mean) <= 4 * np.sqrt(mean / len(counts))
    assert abs(counts.var() / mean - 1) < 0.25


def test_empty_soup_and_level_errors():
    rng = np.random.default_rng(1)
    soup = sample_soup(WINDOW, 0.0, rng)
    assert soup.trajectories == []
    assert len(restrict(soup, 0.0).occupied) == 0
    with pytest.raises(LevelRangeError):
        sample_soup(WINDOW, -1.0, rng)
    with pytest.raises(LevelRangeError):
        restrict(sample_soup(WINDOW, 1.0, rng), 1.5)


def test_trajectories_are_nearest_neighbour_between_jumps():
    soup = sample_soup(WINDOW, 1.0, np.random.default_rng(2))
    for t in soup.trajectories[:20]:
        for seg in t.segments():
            assert len(seg) >= 1
        pts = t.points()
        assert all(p in WINDOW for p in map(tuple, pts[t.jumped]))


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_restrict_nests_in_level(seed, u1, u2):
    soup = sample_soup(WINDOW, 2.0, np.random.default_rng(seed))
    lo, hi = sorted((u1, u2))
    a = restrict(soup, lo).occupied
    b = restrict(soup, hi).occupied
    assert a.issubset(b)
    assert b.issubset(WINDOW)


def test_vacancy_at_zero_level():
    assert vacant_probability(FiniteSet([(0, 0, 0)]), 0.0, 1000, np.random.default_rng(0)) == (1.0, 0.0)
    with pytest.raises(ValueError):
        vacant_probability(FiniteSet([(0, 0, 0)]), 1.0, 10, np.random.default_rng(0))


def test_vacancy_matches_exponential_law_small():
    A = FiniteSet([(0, 0, 0), (1, 0, 0)])
    p, se = vacant_probability(A, 1.0, 20000, np.random.default_rng(3))
    assert abs(p - np.exp(-capacity(A)[0])) <= 3 * se


@given(st.integers(0, 2**32 - 1))
def test_vacancy_monotone_in_the_set(seed):
    A = FiniteSet([(0, 0, 0)])
    B = FiniteSet([(0, 0, 0), (1, 0, 0), (0, 2, 0)])
    lv = hitting_levels([A, B], 1.5, 50, np.random.default_rng(seed), window=WINDOW)
    # a trajectory meeting A also meets B, so B is hit no later
    assert np.all(lv[:, 1] <= lv[:, 0])


def test_hitting_levels_guards():
    rng = np.random.default_rng(0)
    out = hitting_levels([FiniteSet([(0, 0, 0)])], 1.0, 0, rng)
    assert out.shape == (0, 1)
    with pytest.raises(ValueError):
        hitting_levels([FiniteSet([(9, 0, 0)])], 1.0, 5, rng, window=WINDOW)


def test_covariance_positive_and_decaying():
    rng = np.random.default_rng(4)
    near, se1 = occupancy_covariance((0, 0, 0), (2, 0, 0), 1.0, 40000, rng)
    cap0 = capacity(FiniteSet([(0, 0, 0)]))[0]
    exact = np.exp(-capacity(FiniteSet([(0, 0, 0), (2, 0, 0)]))[0]) - np.exp(-2 * cap0)
    assert abs(near - exact) <= 3 * se1
    assert exact > 0
