import dataclasses

import numpy as np
import pytest

from sltlab.endpoint_densities import (ExcursionSampler, acceptance_probability, alpha_ell,
                                       density_factors, exact_density_table, expected_pair_counts,
                                       f_a1, kernels_for, reverse_escape,
                                       sample_excursion_given_endpoints)
from sltlab.walk import SupportError, excursion_decompose


@pytest.fixture(scope="module")
def kern():
    return kernels_for("ball", 3, 1, 3)


def pt(a):
    return tuple(int(c) for c in a)


def test_density_rows_sum_to_one(kern):
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = pt(kern.space.cols[rng.integers(kern.space.n_cols)])
        y = pt(kern.ys[rng.integers(len(kern.ys))])
        tab = exact_density_table(w, y, kern)
        assert tab.masses.min() >= 0
        assert abs(tab.masses.sum() + tab.theta_direct - 1) < 1e-9


def test_exit_law_rows(kern):
    assert np.allclose(kern.exit.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(kern.theta_exit <= kern.exit + 1e-12)


def test_reversibility_by_separate_solves(kern):
    rng = np.random.default_rng(1)
    for _ in range(5):
        j = int(rng.integers(kern.space.n_cols))
        yi = int(np.argmax(kern.esc[j]))
        val = reverse_escape(pt(kern.space.cols[j]), pt(kern.ys[yi]), kern, method="lu")
        assert val == pytest.approx(kern.esc[j, yi], abs=1e-8)


def test_f_a1_nondegenerate(kern):
    sp = kern.space
    i, j = np.unravel_index(np.argmax(kern.kg), kern.kg.shape)
    f = f_a1(pt(sp.rows[i]), pt(sp.cols[j]), kern)
    assert 0 < f < 1


def test_alpha_ell_center_only(kern):
    sp = kern.space
    center = (pt(sp.rows[0]), pt(sp.cols[0]))
    nb = alpha_ell(center, 0.1, kern)
    assert nb.members == [center]
    assert nb.alpha == pytest.approx(1.0)
    with pytest.raises(KeyError):
        alpha_ell(((99, 0, 0), center[1]), 0.1, kern)


def test_ell_bounds_sampled_center_densities(kern):
    sp = kern.space
    i, j = np.unravel_index(np.argmax(kern.kg), kern.kg.shape)
    center = (pt(sp.rows[i]), pt(sp.cols[j]))
    nb = alpha_ell(center, 0.5, kern)
    rng = np.random.default_rng(2)
    for _ in range(50):
        wi, yi = int(rng.integers(sp.n_cols)), int(rng.integers(len(kern.ys)))
        tab = exact_density_table(pt(sp.cols[wi]), pt(kern.ys[yi]), kern)
        assert tab.masses[i, j] <= nb.ell * (1 + 1e-9)
    sub = alpha_ell(center, 0.5, kern, n_sources=50, rng=rng)
    assert sub.n_sources == 50
    assert sub.alpha >= nb.alpha - 1e-12 and sub.ell <= nb.ell * (1 + 1e-12)


def test_alpha_positive_on_mid_geometry():
    big = kernels_for("ball", 10, 4, 3)
    sp = big.space
    i, j = np.unravel_index(np.argmax(big.kg), big.kg.shape)
    nb = alpha_ell((pt(sp.rows[i]), pt(sp.cols[j])), 0.25, big, n_sources=50,
                   rng=np.random.default_rng(3))
    assert nb.alpha > 0 and nb.n_sources == 50


def test_zero_exit_probability_is_support_error(kern):
    dead = dataclasses.replace(kern, exit=np.zeros_like(kern.exit))
    with pytest.raises(SupportError):
        density_factors(dead, 0, 0)


def test_excursion_endpoints_audit(kern):
    sp = kern.space
    g = kern.g
    rng = np.random.default_rng(4)
    sampler = ExcursionSampler(kern)
    for _ in range(30):
        i = int(rng.integers(sp.n_rows))
        j = int(rng.choice(np.nonzero(kern.kg[i] > 0)[0]))
        w0, y0 = pt(sp.rows[i]), pt(sp.cols[j])
        for mode in ("exact", "rejection"):
            p = sample_excursion_given_endpoints(w0, y0, kern, rng, mode=mode, sampler=sampler)
            assert p[0] == w0 and p[len(p) - 1] == y0
            v_visits = [k for k in range(len(p)) if p[k] in g.v]
            assert v_visits[-1] == len(p) - 1
            assert not any(p[k] in g.boundary_a2 for k in range(len(p)))


def test_rejection_rate_matches_exact(kern):
    sp = kern.space
    i, j = np.unravel_index(np.argmax(kern.kg), kern.kg.shape)
    w0, y0 = pt(sp.rows[i]), pt(sp.cols[j])
    p = acceptance_probability(w0, y0, kern)
    sampler = ExcursionSampler(kern)
    rng = np.random.default_rng(5)
    attempts = [sampler.sample_cells(i, j, rng, mode="rejection")[1] for _ in range(2000)]
    # attempts are geometric with success probability p
    mean = np.mean(attempts)
    sd = np.sqrt(1 - p) / p
    assert abs(mean - 1 / p) <= 3 * sd / np.sqrt(len(attempts))


def test_expected_counts_positive(kern):
    pi, theta = expected_pair_counts(kern)
    assert pi.shape == kern.kg.shape and (pi >= 0).all() and theta > 0
    # one clothesline makes at least one step, and each step has total mass one
    assert pi.sum() + theta >= 1 - 1e-9


def test_excursion_piece_is_not_a_full_decomposition(kern):
    # the piece starts in a1, so it cannot be read as a walk started in v
    g = kern.g
    sp = kern.space
    rng = np.random.default_rng(6)
    i, j = np.unravel_index(np.argmax(kern.kg), kern.kg.shape)
    path = sample_excursion_given_endpoints(pt(sp.rows[i]), pt(sp.cols[j]), kern, rng)
    assert path[0] in g.a1 and path[0] not in g.v
    with pytest.raises(ValueError):
        excursion_decompose(path, g)
