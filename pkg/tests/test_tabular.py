import itertools
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dqpope.errors import InputError, ResourceError
from dqpope.tabular import (DiscreteReturnLaw, TabularMdp, apply_bellman, dirac_table, fixed_point,
                            random_law_table, random_mdp, wasserstein_p, wbar_p)


def self_loop(r=1.0, gamma=0.5):
    return TabularMdp(np.ones((1, 1, 1)), [[[(r, 1.0)]]], gamma, np.ones((1, 1)))


def bernoulli_mdp(gamma=0.6):
    P = np.array([[[0.3, 0.7]], [[0.8, 0.2]]])
    reward = [[[(0.0, 0.4), (1.0, 0.6)]], [[(0.0, 0.9), (2.0, 0.1)]]]
    return TabularMdp(P, reward, gamma, np.ones((2, 1)))


def quantile_fn(law, t):
    cum = np.cumsum(law.probs)
    return law.atoms[np.minimum(np.searchsorted(cum, t, side="left"), law.atoms.size - 1)]


# -- discrete laws and W_p ---------------------------------------------------------------


def test_from_pairs_sorts_and_merges():
    law = DiscreteReturnLaw.from_pairs([2.0, 1.0, 2.0 + 1e-13, 3.0], [0.25, 0.25, 0.25, 0.25])
    np.testing.assert_array_equal(law.atoms, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(law.probs, [0.25, 0.5, 0.25])


def test_from_pairs_validation():
    with pytest.raises(InputError):
        DiscreteReturnLaw.from_pairs([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(InputError):
        DiscreteReturnLaw.from_pairs([0.0], [-1.0])
    with pytest.raises(InputError):
        DiscreteReturnLaw.from_pairs([], [])


@pytest.mark.parametrize("p", [1, 2, 3])
def test_wp_dirac_distance(p):
    assert wasserstein_p(DiscreteReturnLaw.dirac(1.5), DiscreteReturnLaw.dirac(-2.0), p) == pytest.approx(3.5)


@pytest.mark.parametrize("p", [1, 2])
def test_wp_matches_grid_quadrature(p):
    a = DiscreteReturnLaw.from_pairs([0.0, 1.0], [0.3, 0.7])
    b = DiscreteReturnLaw.from_pairs([-0.5, 2.0], [0.55, 0.45])
    n = 10**5
    t = (np.arange(n) + 0.5) / n
    quad = np.mean(np.abs(quantile_fn(a, t) - quantile_fn(b, t)) ** p) ** (1 / p)
    assert abs(wasserstein_p(a, b, p) - quad) < 1e-6


def test_wp_equals_scipy_for_p1():
    from scipy.stats import wasserstein_distance
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = DiscreteReturnLaw.from_pairs(rng.normal(size=4), rng.dirichlet(np.ones(4)))
        b = DiscreteReturnLaw.from_pairs(rng.normal(size=3), rng.dirichlet(np.ones(3)))
        ref = wasserstein_distance(a.atoms, b.atoms, a.probs, b.probs)
        assert wasserstein_p(a, b, 1) == pytest.approx(ref, abs=1e-12)


# -- Bellman operator ------------------------------------------------------------------------


@pytest.mark.parametrize("gamma", [0.3, 0.9])
def test_self_loop_geometric_sum(gamma):
    mdp = self_loop(r=2.0, gamma=gamma)
    eta = dirac_table(mdp)
    for t in range(1, 8):
        eta = apply_bellman(mdp, eta)
        law = eta[(0, 0)]
        assert law.atoms.size == 1
        assert law.atoms[0] == pytest.approx(2.0 * (1 - gamma ** t) / (1 - gamma), abs=1e-12)


def test_gamma_zero_returns_reward_law():
    mdp = bernoulli_mdp(gamma=0.0)
    eta = random_law_table(np.random.default_rng(1), mdp)
    out = apply_bellman(mdp, eta)
    for s in range(2):
        law = mdp.reward_law(s, 0)
        np.testing.assert_allclose(out[(s, 0)].atoms, law.atoms)
        np.testing.assert_allclose(out[(s, 0)].probs, law.probs)


def enumerate_bellman(mdp, eta):
    """Independent oracle: one dictionary entry per (reward, s', a', atom) path."""
    out = {}
    for s, a in itertools.product(range(mdp.n_states), range(mdp.n_actions)):
        mass = defaultdict(float)
        for (r, pr), s2, a2 in itertools.product(mdp.reward[s][a], range(mdp.n_states), range(mdp.n_actions)):
            law = eta[(s2, a2)]
            for z, pz in zip(law.atoms, law.probs):
                w = pr * mdp.transition[s, a, s2] * mdp.target_policy[s2, a2] * pz
                if w > 0:
                    mass[round(r + mdp.gamma * z, 12)] += w
        out[(s, a)] = mass
    return out


def test_bernoulli_one_step_matches_enumeration():
    mdp = bernoulli_mdp()
    out = apply_bellman(mdp, dirac_table(mdp))
    np.testing.assert_allclose(out[(0, 0)].atoms, [0.0, 1.0])
    np.testing.assert_allclose(out[(0, 0)].probs, [0.4, 0.6])
    np.testing.assert_allclose(out[(1, 0)].atoms, [0.0, 2.0])
    np.testing.assert_allclose(out[(1, 0)].probs, [0.9, 0.1])
    two = apply_bellman(mdp, out)
    oracle = enumerate_bellman(mdp, out)
    for key, law in two.items():
        ref = oracle[key]
        np.testing.assert_allclose(law.atoms, sorted(ref), atol=1e-12)
        np.testing.assert_allclose(law.probs, [ref[k] for k in sorted(ref)], atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_bellman_conserves_probability_and_mean(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)), float(rng.uniform(0.05, 0.95)))
    eta = random_law_table(rng, mdp)
    out = apply_bellman(mdp, eta)
    means = np.array([[eta[(s, a)].mean for a in range(mdp.n_actions)] for s in range(mdp.n_states)])
    next_mean = np.einsum("sat,tb,tb->sa", mdp.transition, mdp.target_policy, means)
    expected = mdp.mean_reward() + mdp.gamma * next_mean
    for (s, a), law in out.items():
        assert abs(law.probs.sum() - 1.0) < 1e-10
        assert np.all(np.diff(law.atoms) > 0)
        assert abs(law.mean - expected[s, a]) < 1e-10


def test_atom_cap_raises():
    mdp = bernoulli_mdp()
    eta = dirac_table(mdp)
    with pytest.raises(ResourceError):
        for _ in range(20):
            eta = apply_bellman(mdp, eta, atom_cap=200)


def test_undefined_eta_rejected():
    mdp = bernoulli_mdp()
    with pytest.raises(InputError):
        apply_bellman(mdp, {(0, 0): DiscreteReturnLaw.dirac(0.0)})


# -- fixed point ---------------------------------------------------------------------------------


def test_fixed_point_self_loop():
    res = fixed_point(self_loop(1.0, 0.5), tol=1e-10)
    assert res.converged
    assert res.eta[(0, 0)].atoms[0] == pytest.approx(2.0, abs=1e-9)


def test_fixed_point_gamma_zero_one_iteration():
    res = fixed_point(bernoulli_mdp(gamma=0.0), tol=1e-9)
    assert res.converged and res.iterations == 1


def test_fixed_point_gaps_non_increasing():
    mdp = TabularMdp(np.array([[[0.5, 0.5]], [[0.5, 0.5]]]), [[[(0.0, 1.0)]], [[(1.0, 1.0)]]], 0.5,
                     np.ones((2, 1)))
    res = fixed_point(mdp, tol=1e-6, max_iter=12, atom_cap=10**6)
    assert all(b <= a + 1e-6 for a, b in zip(res.gaps, res.gaps[1:]))


def test_fixed_point_reports_non_convergence():
    res = fixed_point(self_loop(1.0, 0.9), tol=1e-12, max_iter=3)
    assert not res.converged and res.iterations == 3


def test_fixed_point_mean_matches_linear_solve():
    mdp = bernoulli_mdp(gamma=0.4)
    res = fixed_point(mdp, tol=1e-4, max_iter=40)
    q = mdp.q_values()
    for s in range(2):
        assert res.eta[(s, 0)].mean == pytest.approx(q[s, 0], abs=1e-3)


# -- occupancy and the Wbar metric -----------------------------------------------------------------


def test_occupancy_matches_resolvent():
    mdp = random_mdp(np.random.default_rng(2), 3, 2, 0.8)
    K = mdp.state_action_kernel()
    start = (mdp.initial[:, None] * mdp.target_policy).reshape(-1)
    exact = (1 - mdp.gamma) * np.linalg.solve((np.eye(6) - mdp.gamma * K).T, start)
    np.testing.assert_allclose(mdp.occupancy().reshape(-1), exact, atol=1e-11)


def test_wbar_examples():
    mdp = self_loop()
    a = {(0, 0): DiscreteReturnLaw.dirac(1.0)}
    b = {(0, 0): DiscreteReturnLaw.dirac(4.0)}
    for p in (1, 2, 3):
        assert wbar_p(mdp, [1.0], a, a, p) == 0.0
        assert wbar_p(mdp, [1.0], a, b, p) == pytest.approx(3.0)
    with pytest.raises(InputError):
        wbar_p(mdp, [0.5], a, b, 1)


def test_wbar_weights_by_nu():
    mdp = bernoulli_mdp()
    a = {(0, 0): DiscreteReturnLaw.dirac(0.0), (1, 0): DiscreteReturnLaw.dirac(0.0)}
    b = {(0, 0): DiscreteReturnLaw.dirac(1.0), (1, 0): DiscreteReturnLaw.dirac(2.0)}
    nu = np.array([0.25, 0.75])
    assert wbar_p(mdp, nu, a, b, 1) == pytest.approx((0.25 * 1 + 0.75 * 4) ** 0.5)


# -- contraction -------------------------------------------------------------------------------------


@pytest.mark.parametrize("gamma", [0.5, 0.9])
@pytest.mark.parametrize("p", [1, 2])
def test_contraction_bound_random_trials(gamma, p):
    rng = np.random.default_rng(int(gamma * 100) + p)
    bound = gamma ** (1 - 1 / (2 * p))
    for _ in range(200):
        mdp = random_mdp(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)), gamma)
        e1, e2 = random_law_table(rng, mdp), random_law_table(rng, mdp)
        nu = mdp.occupancy()
        before = wbar_p(mdp, nu, e1, e2, p)
        after = wbar_p(mdp, nu, apply_bellman(mdp, e1), apply_bellman(mdp, e2), p)
        assert after <= bound * before + 1e-9


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]), st.floats(0.05, 0.95))
@settings(max_examples=60, deadline=None)
def test_contraction_property(seed, p, gamma):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)), gamma)
    e1, e2 = random_law_table(rng, mdp), random_law_table(rng, mdp)
    nu = mdp.occupancy()
    before = wbar_p(mdp, nu, e1, e2, p)
    after = wbar_p(mdp, nu, apply_bellman(mdp, e1), apply_bellman(mdp, e2), p)
    assert after <= gamma ** (1 - 1 / (2 * p)) * before + 1e-9


def test_mdp_validation():
    with pytest.raises(InputError):
        TabularMdp(np.full((1, 1, 1), 0.9), [[[(0.0, 1.0)]]], 0.5, np.ones((1, 1)))
    with pytest.raises(InputError):
        TabularMdp(np.ones((1, 1, 1)), [[[(0.0, 0.5)]]], 0.5, np.ones((1, 1)))
    with pytest.raises(InputError):
        TabularMdp(np.ones((1, 1, 1)), [[[(0.0, 1.0)]]], 0.5, np.full((1, 1), 0.5))
    with pytest.raises(InputError):
        TabularMdp(np.ones((1, 1, 1)), [[[(0.0, 1.0)]]], 1.0, np.ones((1, 1)))
