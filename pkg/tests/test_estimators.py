import numpy as np
import pytest
from scipy import stats

from conftest import shipped_config
from dqpope.envs import (PolicySpec, TabularEnv, Transition, as_arrays, collect_dataset, make_toy_env,
                         mc_return_distribution, rollout_episodes, tabular_policy)
from dqpope.errors import ConfigError, DegenerateRatioError, InputError, TrainingDivergedError
from dqpope.estimators import (AtomsConfig, DqpopeConfig, _shards, cateope_project, cateope_train,
                               dope_train, dqope_train, dqpope_loss, dqpope_train, dr_estimate,
                               dump_quantile_curve, per_step_is_estimate, q_fn_from_net, wis_estimate)
from dqpope.experiments import run_toy_mse_table, sanity_replicate
from dqpope.metrics import midpoint_levels, open_uniform, pinball, sample_from_net
from dqpope.neural import make_net
from dqpope.tabular import TabularMdp

ONE = PolicySpec("fixed-action", 1, {"action": 0})
X0 = np.zeros((1, 1))


def dirac_toy(value, n, seed):
    env = make_toy_env({"distribution": "normal", "sigma": 0.0}, base_value=value)
    return collect_dataset(env, ONE, n, np.random.default_rng(seed), as_list=False)


def chain_mdp(gamma=0.9):
    """0 -> 1 -> 2 -> 3 with reward 1 per step; 3 is terminal."""
    P = np.zeros((4, 1, 4))
    for i in range(3):
        P[i, 0, i + 1] = 1.0
    P[3, 0, 3] = 1.0
    reward = [[[(1.0, 1.0)]]] * 3 + [[[(0.0, 1.0)]]]
    return TabularMdp(P, reward, gamma, np.ones((4, 1)), initial=np.array([1.0, 0, 0, 0]),
                      terminal_states=(3,))


def episodic_mdp(pi, gamma=0.9):
    """State 0 is live, state 1 absorbs with zero reward and ends the episode."""
    P = np.array([[[0.8, 0.2], [0.5, 0.5]], [[0.0, 1.0], [0.0, 1.0]]])
    reward = [[[(0.0, 0.5), (1.0, 0.5)], [(2.0, 1.0)]], [[(0.0, 1.0)], [(0.0, 1.0)]]]
    table = np.array([pi, [0.5, 0.5]])
    return TabularMdp(P, reward, gamma, table, initial=np.array([1.0, 0.0]), terminal_states=(1,))


def true_value(mdp):
    return float(mdp.q_values()[0] @ mdp.target_policy[0])


def exact_q_fn(mdp):
    q = mdp.q_values()
    return lambda states: q[np.asarray(states)[:, 0].astype(int)]


def two_state_transitions(n, seed):
    rng = np.random.default_rng(seed)
    return [Transition(np.array([float(rng.integers(2))]), int(rng.integers(2)), float(rng.normal()),
                       np.array([float(rng.integers(2))]), bool(rng.random() < 0.3)) for _ in range(n)]


# -- DQPOPE ---------------------------------------------------------------------------------------------


def test_dqpope_rejects_empty_dataset():
    with pytest.raises(InputError):
        dqpope_train([], ONE, DqpopeConfig(), np.random.default_rng(0))


def test_dqpope_divergence_reported():
    data = dirac_toy(1e9, 64, 0)
    with pytest.raises(TrainingDivergedError) as info:
        dqpope_train(data, ONE, DqpopeConfig(), np.random.default_rng(1))
    assert info.value.step == 0 and info.value.loss > 1e6


def test_dqpope_rejects_level_free_embedding():
    with pytest.raises(ConfigError):
        dqpope_train(dirac_toy(0.0, 8, 0), ONE, DqpopeConfig(embedding_mode="none"), np.random.default_rng(0))


def test_single_draw_loss_matches_per_sample_algorithm():
    data = two_state_transitions(48, 2)
    target_policy = tabular_policy([[0.3, 0.7], [0.9, 0.1]])
    cfg = DqpopeConfig(gamma=0.8)
    rng = np.random.default_rng(3)
    net, tgt = make_net(1, 2, (12, 12), rng), make_net(1, 2, (12, 12), rng)
    batch = as_arrays(data)
    got = dqpope_loss(net, tgt, batch, target_policy, cfg, np.random.default_rng(4))

    # direct transcription: the same three draws, then one sample at a time
    rng = np.random.default_rng(4)
    taus = open_uniform(rng, (len(data), 1))[:, 0]
    next_actions = target_policy.sample(batch.next_states, rng)
    u = open_uniform(rng, (len(data), 1))[:, 0]
    losses = []
    for i, tr in enumerate(data):
        y = tr.reward
        if not tr.terminal:
            y += cfg.gamma * tgt.forward(tr.next_state[None, :], [next_actions[i]], [u[i]])[0]
        losses.append(pinball(y - net.forward(tr.state[None, :], [tr.action], [taus[i]])[0], taus[i]))
    assert got.loss == np.mean(losses)
    np.testing.assert_array_equal(got.taus, taus)


def test_dqpope_gamma_zero_dirac_reward():
    net = dqpope_train(dirac_toy(1.5, 2000, 5), ONE, DqpopeConfig(gamma=0.0, epochs_per_iteration=5),
                       np.random.default_rng(6))
    draws = sample_from_net(net, np.zeros(1), 0, 1000, np.random.default_rng(7))
    assert abs(draws.mean - 1.5) < 0.05


def test_dqpope_population_minimiser_normal():
    env = make_toy_env("N(0,1)")
    data = collect_dataset(env, ONE, 10_000, np.random.default_rng(8), as_list=False)
    cfg = DqpopeConfig(hidden=(64, 64), learning_rate=2e-4, batch_size=256, steps_per_iteration=5000)
    net = dqpope_train(data, ONE, cfg, np.random.default_rng(9))
    med, upper = net.forward(np.zeros((2, 1)), [0, 0], [0.5, stats.norm.cdf(1.0)])
    assert abs(med) < 0.1
    assert 0.8 <= upper - med <= 1.2


@pytest.fixture(scope="module")
def sanity_fit():
    cfg = shipped_config("quantile_fit.yaml", replicates=1)
    return sanity_replicate((cfg, 0))


def test_generator_fidelity_ks(sanity_fit):
    _, _, ks, _, fresh = sanity_fit
    assert fresh.samples.size == 5000
    assert ks < 0.08


def test_quantile_monotone_after_training(sanity_fit):
    assert sanity_fit[3] <= 0.05


def test_training_is_deterministic():
    data = dirac_toy(0.3, 256, 10)
    a = dqpope_train(data, ONE, DqpopeConfig(), np.random.default_rng(11))
    b = dqpope_train(data, ONE, DqpopeConfig(), np.random.default_rng(11))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_data_split_shards_and_divisibility():
    data = dirac_toy(0.0, 12, 12)
    data.rewards[...] = np.arange(12.0)
    shards = _shards(data, DqpopeConfig(iterations=3, data_split=True))
    assert [s.rewards.tolist() for s in shards] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]]
    assert all(s is data for s in _shards(data, DqpopeConfig(iterations=3)))
    with pytest.raises(ConfigError):
        dqpope_train(data, ONE, DqpopeConfig(iterations=5, data_split=True), np.random.default_rng(0))


def test_history_records_every_step():
    hist = []
    dqpope_train(dirac_toy(0.0, 100, 13), ONE, DqpopeConfig(batch_size=32, epochs_per_iteration=2),
                 np.random.default_rng(14), history=hist)
    assert len(hist) == 8
    assert all(np.isfinite(hist))


@pytest.mark.parametrize("bad", [dict(iterations=0), dict(m_target_samples=0), dict(gamma=1.0),
                                 dict(target_update="sometimes"), dict(learning_rate=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        DqpopeConfig(**bad)


@pytest.mark.parametrize("m,mq", [(1, 1), (3, 1), (2, 4)])
def test_multi_sample_loss_gradient_matches_finite_difference(m, mq):
    data = as_arrays(two_state_transitions(16, 15))
    pol = tabular_policy([[0.5, 0.5], [0.2, 0.8]])
    cfg = DqpopeConfig(m_target_samples=m, m_quantile_levels=mq)
    rng = np.random.default_rng(16)
    net, tgt = make_net(1, 2, (8,), rng), make_net(1, 2, (8,), rng)
    b = dqpope_loss(net, tgt, data, pol, cfg, np.random.default_rng(17))
    grads = net.backward(b.states, b.actions, b.taus, b.upstream)
    h = 1e-6
    for key in ("W0", "b1"):
        idx = (0, 0) if net.params[key].ndim == 2 else (0,)
        old = net.params[key][idx]
        vals = []
        for sign in (1, -1):
            net.params[key][idx] = old + sign * h
            vals.append(dqpope_loss(net, tgt, data, pol, cfg, np.random.default_rng(17)).loss)
        net.params[key][idx] = old
        assert abs((vals[0] - vals[1]) / (2 * h) - grads[key][idx]) < 1e-5


# -- toy replicate study -------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_t2():
    cfg = shipped_config("toy_mse_table.yaml", noise_settings=["t(2)"],
                         estimators=["dope", "dqpope", {"name": "dqope", "n_levels": 32}])
    return run_toy_mse_table(cfg, write=False)


def test_dope_mse_exceeds_dqpope_k32_on_t2(toy_t2):
    dope, k32 = toy_t2.mse("t(2)", "DOPE"), toy_t2.mse("t(2)", "DQPOPE(K=32)")
    print(f"t(2) MSE x1e3: DOPE {1e3 * dope:.2f}, DQPOPE(K=32) {1e3 * k32:.2f}")
    assert dope > k32


def test_dqope_mse_between_dope_and_dqpope(toy_t2):
    lo, hi = sorted([toy_t2.mse("t(2)", "DOPE"), toy_t2.mse("t(2)", "DQPOPE(K=32)")])
    dqope = toy_t2.mse("t(2)", "DQOPE(K=32)")
    print(f"t(2) MSE x1e3: DQOPE(K=32) {1e3 * dqope:.2f}, interval [{1e3 * lo:.2f}, {1e3 * hi:.2f}]")
    assert lo <= dqope <= hi


def test_dqpope_k32_normal_replicates_near_zero():
    cfg = shipped_config("toy_mse_table.yaml", noise_settings=["N(0,1)"], estimators=["dqpope"])
    est = run_toy_mse_table(cfg, write=False).estimates["N(0,1)|DQPOPE(K=32)"]
    hits = int(np.sum(np.abs(est) < 0.15))
    print(f"N(0,1) DQPOPE(K=32): {hits}/100 replicates within 0.15")
    assert hits >= 90


# -- DOPE --------------------------------------------------------------------------------------------------


def test_dope_chain_matches_tabular_q():
    mdp = chain_mdp()
    env, pol = TabularEnv(mdp), tabular_policy(mdp.target_policy)
    data = collect_dataset(env, pol, 2000, np.random.default_rng(18), as_list=False)
    cfg = DqpopeConfig(gamma=0.9, hidden=(64, 64), learning_rate=1e-3, batch_size=64,
                       target_update="hard", epochs_per_iteration=20)
    net = dope_train(data, pol, cfg, np.random.default_rng(19))
    assert abs(net.forward(X0, [0])[0] - mdp.q_values()[0, 0]) < 0.1


def test_dope_gamma_zero_constant_reward():
    data = dirac_toy(2.0, 2000, 20)
    net = dope_train(data, ONE, DqpopeConfig(gamma=0.0, epochs_per_iteration=5), np.random.default_rng(21))
    assert np.max(np.abs(net.forward(data.states, data.actions) - 2.0)) < 0.05


def test_dope_rejects_empty():
    with pytest.raises(InputError):
        dope_train([], ONE, DqpopeConfig(), np.random.default_rng(0))


# -- DQOPE --------------------------------------------------------------------------------------------------


def test_dqope_single_median_head():
    model = dqope_train(dirac_toy(0.7, 2000, 22), ONE, [0.5], DqpopeConfig(epochs_per_iteration=5),
                        np.random.default_rng(23))
    assert abs(model.quantiles(X0, [0])[0, 0] - 0.7) < 0.05


@pytest.mark.parametrize("levels", [[0.5, 0.5], [0.6, 0.4], [0.0, 0.5], [0.5, 1.0], []])
def test_dqope_level_validation(levels):
    with pytest.raises(InputError):
        dqope_train(dirac_toy(0.0, 8, 0), ONE, levels, DqpopeConfig(), np.random.default_rng(0))


def test_dqope_99_levels_normal_quantiles():
    data = collect_dataset(make_toy_env("N(0,1)"), ONE, 10_000, np.random.default_rng(24), as_list=False)
    levels = midpoint_levels(99)
    cfg = DqpopeConfig(hidden=(64, 64), learning_rate=3e-4, batch_size=64, steps_per_iteration=3000)
    q = dqope_train(data, ONE, levels, cfg, np.random.default_rng(25)).quantiles(X0, [0])[0]
    inner = (levels >= 0.1) & (levels <= 0.9)
    assert np.max(np.abs(q - stats.norm.ppf(levels))[inner]) < 0.15


# -- CateOPE --------------------------------------------------------------------------------------------------

ATOMS = AtomsConfig(n_atoms=11, v_min=-5.0, v_max=5.0)


def test_projection_identity():
    p = np.random.default_rng(26).dirichlet(np.ones(11))
    np.testing.assert_array_equal(cateope_project(0.0, 1.0, p, ATOMS.atoms, -5.0, 5.0), p)


def test_projection_full_clip():
    p = np.random.default_rng(27).dirichlet(np.ones(11))
    out = cateope_project(100.0, 0.9, p, ATOMS.atoms, -5.0, 5.0)
    np.testing.assert_array_equal(out[:-1], 0.0)
    assert out[-1] == pytest.approx(1.0, abs=1e-15)


def test_projection_half_split():
    p = np.eye(11)[4]
    out = cateope_project(0.5, 1.0, p, ATOMS.atoms, -5.0, 5.0)
    expect = np.zeros(11)
    expect[4] = expect[5] = 0.5
    np.testing.assert_array_equal(out, expect)


def test_projection_conserves_mass():
    rng = np.random.default_rng(28)
    n = 10_000
    p = rng.dirichlet(np.ones(11), size=n)
    out = cateope_project(rng.uniform(-8, 8, n), rng.uniform(0, 1, n), p, ATOMS.atoms, -5.0, 5.0)
    assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-9
    assert np.all(out >= 0)


def test_projection_preserves_mean_inside_support():
    # linear interpolation keeps the mean when nothing clips
    rng = np.random.default_rng(29)
    atoms = ATOMS.atoms
    for _ in range(100):
        p = rng.dirichlet(np.ones(11))
        r, g = rng.uniform(-0.5, 0.5), rng.uniform(0, 0.9)
        out = cateope_project(r, g, p, atoms, -5.0, 5.0)
        assert out @ atoms == pytest.approx(r + g * (p @ atoms), abs=1e-12)


def test_cateope_dirac_concentrates():
    model = cateope_train(dirac_toy(2.0, 2000, 30), ONE, AtomsConfig(), DqpopeConfig(epochs_per_iteration=5),
                          np.random.default_rng(31))
    atoms = model.atoms
    near = np.abs(atoms - 2.0) <= (atoms[1] - atoms[0]) + 1e-12
    p = model.probs(X0, [0])[0]
    assert p[near].sum() >= 0.9
    assert p.sum() == pytest.approx(1.0)


def test_cateope_value_stays_in_support():
    cfg = AtomsConfig(n_atoms=21, v_min=-1.0, v_max=1.0)
    model = cateope_train(dirac_toy(20.0, 1000, 32), ONE, cfg, DqpopeConfig(epochs_per_iteration=20),
                          np.random.default_rng(33))
    v = model.value(X0, [0])[0]
    assert -1.0 <= v <= 1.0
    assert v > 0.9


# -- WIS and DR ---------------------------------------------------------------------------------------------


def episodes(mdp, policy, n, seed):
    return rollout_episodes(TabularEnv(mdp), policy, n, np.random.default_rng(seed))


def discounted(ep, gamma):
    return sum(gamma ** t * tr.reward for t, tr in enumerate(ep))


def test_wis_on_policy_is_mean_return():
    mdp = episodic_mdp([0.3, 0.7])
    pol = tabular_policy(mdp.target_policy)
    eps = episodes(mdp, pol, 500, 34)
    assert wis_estimate(eps, pol, pol, 0.9) == pytest.approx(np.mean([discounted(e, 0.9) for e in eps]), abs=1e-12)


def test_wis_single_trajectory_is_its_return():
    mdp = episodic_mdp([0.3, 0.7])
    target = tabular_policy(mdp.target_policy)
    behavior = tabular_policy([[0.6, 0.4], [0.5, 0.5]])
    ep = max(episodes(mdp, behavior, 50, 35), key=len)
    assert wis_estimate([ep], target, behavior, 0.9) == pytest.approx(discounted(ep, 0.9), abs=1e-12)


def test_wis_two_state_within_two_percent():
    mdp = episodic_mdp([0.3, 0.7])
    target = tabular_policy(mdp.target_policy)
    behavior = tabular_policy([[0.6, 0.4], [0.5, 0.5]])
    est = wis_estimate(episodes(mdp, behavior, 10**5, 36), target, behavior, 0.9)
    assert abs(est - true_value(mdp)) < 0.02 * abs(true_value(mdp))


def test_zero_behavior_probability_rejected():
    mdp = episodic_mdp([0.3, 0.7])
    target = tabular_policy(mdp.target_policy)
    behavior = tabular_policy([[1.0, 0.0], [0.5, 0.5]])
    eps = episodes(mdp, target, 50, 37)
    with pytest.raises(DegenerateRatioError):
        wis_estimate(eps, target, behavior, 0.9)
    with pytest.raises(DegenerateRatioError):
        dr_estimate(eps, target, behavior, exact_q_fn(mdp), 0.9)


def test_dr_exact_q_deterministic_policy_equals_each_return():
    mdp = episodic_mdp([0.0, 1.0])
    pol = tabular_policy(mdp.target_policy)
    q = exact_q_fn(mdp)
    for ep in episodes(mdp, pol, 300, 38):
        assert dr_estimate([ep], pol, pol, q, 0.9) == pytest.approx(discounted(ep, 0.9), abs=1e-9)


def test_dr_exact_q_stochastic_policy_unbiased():
    mdp = episodic_mdp([0.3, 0.7])
    pol = tabular_policy(mdp.target_policy)
    q = exact_q_fn(mdp)
    eps = episodes(mdp, pol, 20_000, 39)
    diff = np.array([dr_estimate([ep], pol, pol, q, 0.9) - discounted(ep, 0.9) for ep in eps])
    assert abs(diff.mean()) < 4 * diff.std() / np.sqrt(diff.size)


def test_dr_zero_q_is_per_step_is():
    mdp = episodic_mdp([0.3, 0.7])
    target = tabular_policy(mdp.target_policy)
    behavior = tabular_policy([[0.6, 0.4], [0.5, 0.5]])
    eps = episodes(mdp, behavior, 2000, 40)
    zero = lambda s: np.zeros((len(s), 2))
    assert dr_estimate(eps, target, behavior, zero, 0.9) == pytest.approx(
        per_step_is_estimate(eps, target, behavior, 0.9), rel=1e-12)


def test_dr_variance_below_is_variance():
    mdp = episodic_mdp([0.3, 0.7])
    target = tabular_policy(mdp.target_policy)
    behavior = tabular_policy([[0.6, 0.4], [0.5, 0.5]])
    q_true = mdp.q_values()
    q_rough = q_true + np.random.default_rng(41).uniform(-0.3, 0.3, q_true.shape)
    rough = lambda s: q_rough[np.asarray(s)[:, 0].astype(int)]
    eps = episodes(mdp, behavior, 20_000, 42)
    dr = [dr_estimate([ep], target, behavior, rough, 0.9) for ep in eps]
    ips = [per_step_is_estimate([ep], target, behavior, 0.9) for ep in eps]
    assert np.var(dr) < np.var(ips)
    assert abs(np.mean(dr) - true_value(mdp)) < 0.05 * true_value(mdp)


def test_dr_with_trained_network_q():
    mdp = chain_mdp()
    env, pol = TabularEnv(mdp), tabular_policy(mdp.target_policy)
    data = collect_dataset(env, pol, 1000, np.random.default_rng(43), as_list=False)
    net = dope_train(data, pol, DqpopeConfig(gamma=0.9, hidden=(64, 64), learning_rate=1e-3, batch_size=64,
                                             target_update="hard", epochs_per_iteration=20),
                     np.random.default_rng(44))
    eps = episodes(mdp, pol, 5, 45)
    assert dr_estimate(eps, pol, pol, q_fn_from_net(net), 0.9) == pytest.approx(2.71, abs=1e-9)


# -- quantile curve dump ----------------------------------------------------------------------------------------


def test_dump_quantile_curve_for_each_estimator(tmp_path):
    data = dirac_toy(1.0, 64, 46)
    cfg = DqpopeConfig()
    models = {
        "dqpope": dqpope_train(data, ONE, cfg, np.random.default_rng(47)),
        "dope": dope_train(data, ONE, cfg, np.random.default_rng(48)),
        "dqope": dqope_train(data, ONE, midpoint_levels(5), cfg, np.random.default_rng(49)),
        "cateope": cateope_train(data, ONE, AtomsConfig(), cfg, np.random.default_rng(50)),
    }
    taus = midpoint_levels(9)
    for name, model in models.items():
        path = tmp_path / f"{name}.csv"
        dump_quantile_curve(path, model, np.zeros(1), 0, taus)
        lines = path.read_text().splitlines()
        assert lines[0] == "tau,value"
        assert len(lines) == 10
        vals = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
        np.testing.assert_allclose(vals[:, 0], taus, rtol=1e-8)
        assert np.all(np.isfinite(vals[:, 1]))


def test_mc_oracle_of_dirac_toy_is_constant():
    env = make_toy_env({"distribution": "normal", "sigma": 0.0}, base_value=0.25)
    assert np.all(mc_return_distribution(env, ONE, 10, np.random.default_rng(0)).samples == 0.25)
