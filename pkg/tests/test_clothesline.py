import numpy as np
import pytest
from scipy import stats

from sltlab.clothesline import ClotheslineSampler, sample_cloth_u, sample_clothesline
from sltlab.endpoint_densities import kernels_for
from sltlab.geometry import FiniteSet
from sltlab.potential import capacity


@pytest.fixture(scope="module")
def kern():
    return kernels_for("ball", 3, 1, 3)


@pytest.fixture(scope="module")
def many(kern):
    rng = np.random.default_rng(0)
    s = ClotheslineSampler(kern)
    return [s.sample_indices(rng) for _ in range(10000)]


def test_fixed_start(kern):
    w0 = tuple(int(c) for c in kern.space.cols[3])
    rng = np.random.default_rng(1)
    for _ in range(50):
        cl = sample_clothesline(kern, ("point", w0), rng)
        assert cl.pairs[0][0] == w0


def test_membership_audit(kern):
    g = kern.g
    rng = np.random.default_rng(2)
    sampler = ClotheslineSampler(kern)
    for _ in range(300):
        cl = sample_clothesline(g, "equilibrium", rng, sampler=sampler)
        assert cl.t_delta == len(cl.pairs) >= 1
        for w, y in cl.pairs:
            assert w in g.v and y in g.boundary_a2
    assert sampler.sample(rng).to_json().startswith("{")


def test_hitting_start_may_be_empty(kern):
    rng = np.random.default_rng(3)
    y = tuple(int(c) for c in kern.ys[0])
    lens = [len(sample_clothesline(kern, ("hitting", y), rng).pairs) for _ in range(400)]
    p = kern.p_return[0]
    assert abs(np.mean([n == 0 for n in lens]) - (1 - p)) <= 4 * np.sqrt(p * (1 - p) / 400)
    with pytest.raises(ValueError):
        sample_clothesline(kern, "uniform", rng)


def test_tail_ratio_bounded_away_from_one(kern, many):
    t = np.array([len(w) for w, _ in many])
    worst = float(np.minimum(kern.p_return, 1.0).max())
    for k in range(1, 11):
        base = (t > k).sum()
        if base < 30:
            break
        ratio = (t > k + 1).sum() / base
        assert ratio <= worst + 3 * np.sqrt(worst * (1 - worst) / base)
    assert worst < 1


def test_markov_property_audit(kern, many):
    # law of the next entrance given the previous exit does not depend on the step number
    y_star = np.bincount(np.concatenate([y[:-1] for _, y in many if len(y) > 1])).argmax()
    octant = lambda idx: (kern.space.cols[idx] > 0) @ np.array([1, 2, 4])  # noqa: E731
    first, second = [], []
    for w, y in many:
        if len(w) > 1 and y[0] == y_star:
            first.append(octant(w[1]))
        if len(w) > 2 and y[1] == y_star:
            second.append(octant(w[2]))
    # the first transition against the exact table, then step one against step two when there is data
    cols = octant(np.arange(kern.space.n_cols))
    exact = np.bincount(cols, weights=kern.ret[y_star], minlength=8)
    exact = exact / exact.sum()
    counts = np.bincount(first, minlength=8)
    keep = exact > 0
    assert stats.chisquare(counts[keep], exact[keep] * counts.sum()).pvalue > 0.01
    if len(second) >= 50:
        table = np.vstack([np.bincount(first, minlength=8), np.bincount(second, minlength=8)])
        table = table[:, table.sum(0) > 0]
        assert stats.chi2_contingency(table).pvalue > 0.01


def test_cloth_u_zero_is_empty():
    out = sample_cloth_u(FiniteSet([(0, 0, 0)]), FiniteSet([(0, 0, 0)]), 0.0, np.random.default_rng(0))
    assert out.traces == []
    with pytest.raises(ValueError):
        sample_cloth_u(FiniteSet([(0, 0, 0)]), FiniteSet([(0, 0, 0)]), -1.0, np.random.default_rng(0))


def test_cloth_u_single_point_geometric_runs():
    origin = FiniteSet([(0, 0, 0)])
    out = sample_cloth_u(origin, origin, 3000.0, np.random.default_rng(4))
    q = 1 - capacity(origin)[0]  # return probability to the origin
    extra = np.array([len(t) - 1 for t in out.traces])
    assert all(p == (0, 0, 0) for t in out.traces for p in t)
    n = len(extra)
    mean = q / (1 - q)
    sd = np.sqrt(q) / (1 - q)
    assert abs(extra.mean() - mean) <= 4 * sd / np.sqrt(n)


def test_cloth_u_matches_clothesline_first_pair(kern):
    g = kern.g
    rng = np.random.default_rng(5)
    out = sample_cloth_u(g.v, g.boundary_a2, 3000.0 / kern.cap_v, rng)
    skel = [(t[0], t[1]) for t in out.traces]
    sampler = ClotheslineSampler(kern)
    direct = [sampler.sample(rng).pairs[0] for _ in range(len(skel))]

    def cell(pair):
        w, y = np.array(pair[0]), np.array(pair[1])
        return int((w[2] > 0) + 2 * (y[2] > 0) + 4 * (y[0] > 0))

    a = np.bincount([cell(p) for p in skel], minlength=8)
    b = np.bincount([cell(p) for p in direct], minlength=8)
    table = np.vstack([a, b])[:, (a + b) > 0]
    assert stats.chi2_contingency(table).pvalue > 0.01
