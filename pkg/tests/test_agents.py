import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from batchexp.agents import (
    AGENT_KINDS,
    AgentConfig,
    act,
    act_batch,
    agent_reset,
    ei_index,
    exploit,
    observe,
    optimal_probabilities,
    predicted_means,
    select_top_k,
    ucb_index,
)
from batchexp.errors import ConfigError, InvalidInputError
from batchexp.linear_model import DesignState, FeatureMap, GaussianPosterior, featurize_all


def with_model(state, model):
    return dataclasses.replace(state, model=model)


def two_arm_ts(kind="LinearTS", beta=0.5):
    cfg = AgentConfig(kind, FeatureMap("arm_one_hot", 2), beta=beta)
    state = agent_reset(cfg, 2)
    return with_model(state, GaussianPosterior(np.array([0.0, 1.0]), np.eye(2)))


def point_mass(kind, theta, costs=None, beta=0.5):
    k = len(theta)
    cfg = AgentConfig(kind, FeatureMap("arm_one_hot", k), costs=costs, beta=beta)
    state = agent_reset(cfg, k)
    return with_model(state, GaussianPosterior(np.asarray(theta, float), np.zeros((k, k))))


def arm_frequencies(state, n, seed):
    probs = act_batch(state, np.zeros((n, 1)), 0, np.random.default_rng(seed))
    return probs.mean(axis=0)


# -- reset ------------------------------------------------------------------------


def test_reset_linear_ts_holds_prior():
    cfg = AgentConfig("LinearTS", FeatureMap("per_arm", 3, p=2), prior_var=2.0)
    state = agent_reset(cfg, 3, 6)
    assert isinstance(state.model, GaussianPosterior)
    assert np.array_equal(state.model.theta, np.zeros(6))
    assert np.array_equal(state.model.sigma, 2.0 * np.eye(6))
    assert state.n_obs == 0


def test_reset_uniform_has_no_model():
    state = agent_reset(AgentConfig("Uniform"), 4)
    assert state.model is None
    assert state.n_obs == 0


def test_reset_mab_uses_one_hot():
    state = agent_reset(AgentConfig("MabTS"), 3)
    assert state.fmap.kind == "arm_one_hot"
    assert state.model.d == 3
    assert np.array_equal(state.model.sigma, np.eye(3))


def test_reset_design_kinds_hold_ridge():
    state = agent_reset(AgentConfig("LinearUCB", FeatureMap("arm_one_hot", 2), ridge=3.0), 2)
    assert isinstance(state.model, DesignState)
    assert np.array_equal(state.model.v, 3.0 * np.eye(2))


@pytest.mark.parametrize(
    "cfg, k, d",
    [
        (AgentConfig("LinearTS"), 3, None),
        (AgentConfig("LinearTS", FeatureMap("arm_one_hot", 2)), 3, None),
        (AgentConfig("LinearTS", FeatureMap("per_arm", 2, p=2)), 2, 5),
        (AgentConfig("BudgetTS", FeatureMap("arm_one_hot", 2)), 2, None),
        (AgentConfig("BudgetTS", FeatureMap("arm_one_hot", 2), costs=(1, 2, 3)), 2, None),
    ],
)
def test_reset_rejects_inconsistent_config(cfg, k, d):
    with pytest.raises(ConfigError):
        agent_reset(cfg, k, d)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "Greedy"},
        {"kind": "LinearTTTS", "beta": 0.0},
        {"kind": "LinearTTTS", "beta": 1.5},
        {"kind": "LinearUCB", "alpha": -1.0},
        {"kind": "BudgetTS", "costs": (1.0, 0.0)},
        {"kind": "LinearTS", "noise_var": 0.0},
    ],
)
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        AgentConfig(**kwargs)


def test_alpha_schedule_clamps_to_last_entry():
    cfg = AgentConfig("LinearUCB", alpha=5.0, alpha_schedule=(3.0, 2.0))
    assert [cfg.alpha_at(t) for t in range(4)] == [3.0, 2.0, 2.0, 2.0]
    assert AgentConfig("LinearUCB", alpha=5.0).alpha_at(7) == 5.0


# -- act --------------------------------------------------------------------------


def test_uniform_act_is_flat():
    state = agent_reset(AgentConfig("Uniform"), 4)
    assert np.array_equal(act(state, [0.3], 0, np.random.default_rng(0)), np.full(4, 0.25))


def test_ts_calibration_matches_normal_difference():
    # P(arm 1 best) = P(N(1,1) > N(0,1)) = Phi(1 / sqrt(2))
    expected = stats.norm.cdf(1.0 / np.sqrt(2.0))
    freq = arm_frequencies(two_arm_ts(), 100_000, 11)
    assert abs(freq[1] - expected) < 0.01


def test_mab_ts_calibration():
    state = with_model(agent_reset(AgentConfig("MabTS"), 2), GaussianPosterior(np.array([0.0, 1.0]), np.eye(2)))
    freq = arm_frequencies(state, 100_000, 12)
    assert abs(freq[1] - stats.norm.cdf(1.0 / np.sqrt(2.0))) < 0.01


def test_ttts_beta_one_matches_ts_in_law():
    ts = arm_frequencies(two_arm_ts(), 100_000, 3)
    ttts = arm_frequencies(two_arm_ts("LinearTTTS", beta=1.0), 100_000, 4)
    assert 0.5 * np.abs(ts - ttts).sum() < 0.01


def test_ttts_mixture_oracle():
    # two arms: the challenger is always the other arm, so
    # P(arm 1) = beta * p + (1 - beta) * (1 - p)
    p = stats.norm.cdf(1.0 / np.sqrt(2.0))
    beta = 0.3
    freq = arm_frequencies(two_arm_ts("LinearTTTS", beta=beta), 100_000, 5)
    assert abs(freq[1] - (beta * p + (1 - beta) * (1 - p))) < 0.01


def test_ttts_falls_back_to_runner_up():
    # a degenerate posterior never produces a different leader
    state = point_mass("LinearTTTS", [0.0, 1.0, 0.5], beta=1e-12)
    probs = act_batch(state, np.zeros((20, 1)), 0, np.random.default_rng(0))
    assert np.all(probs[:, 2] == 1.0)


def test_ucb_hand_example():
    cfg = AgentConfig("LinearUCB", FeatureMap("arm_one_hot", 2), alpha=1.0)
    state = with_model(agent_reset(cfg, 2), DesignState(np.eye(2), np.array([1.0, 0.0])))
    phis = featurize_all(state.fmap, np.zeros((1, 1)))
    assert np.allclose(ucb_index(state, phis)[0], [2.0, 1.0])
    assert np.array_equal(act(state, [0.0], 0, np.random.default_rng(0)), [1.0, 0.0])


def test_ei_matches_closed_form():
    cfg = AgentConfig("LinearEI", FeatureMap("arm_one_hot", 3), noise_var=2.0)
    v = np.diag([2.0, 4.0, 1.0])
    b = np.array([1.0, 1.0, -1.0])
    state = with_model(agent_reset(cfg, 3), DesignState(v, b))
    phis = featurize_all(state.fmap, np.zeros((1, 1)))
    m = b / np.diag(v)
    sd = np.sqrt(2.0 / np.diag(v))
    z = (m - m.max()) / sd
    expected = sd * (z * stats.norm.cdf(z) + stats.norm.pdf(z))
    assert np.allclose(ei_index(state, phis)[0], expected, atol=1e-12)
    assert np.argmax(act(state, [0.0], 0, np.random.default_rng(0))) == np.argmax(expected)


def test_ei_zero_variance_uses_gap():
    cfg = AgentConfig("LinearEI", FeatureMap("arm_one_hot", 2))
    state = with_model(agent_reset(cfg, 2), DesignState(np.eye(2), np.array([1.0, 0.5])))
    phis = np.zeros((1, 2, 2))
    assert np.array_equal(ei_index(state, phis), np.zeros((1, 2)))


def test_budget_ts_ratio_example():
    state = point_mass("BudgetTS", [2.0, 1.0], costs=(1.0, 2.0))
    assert np.allclose(act(state, [0.0], 0, np.random.default_rng(0)), [0.8, 0.2], atol=1e-12)


def test_budget_ts_clamps_negative_draws():
    state = point_mass("BudgetTS", [-1.0, 1.0, 0.0], costs=(1.0, 1.0, 1.0))
    probs = act(state, [0.0], 0, np.random.default_rng(0))
    assert np.all(probs >= 0) and probs[1] > 1 - 1e-8


def test_per_batch_shares_one_draw():
    cfg = AgentConfig("LinearTS", FeatureMap("arm_one_hot", 3), per_batch=True)
    probs = act_batch(agent_reset(cfg, 3), np.zeros((50, 1)), 0, np.random.default_rng(1))
    assert np.all(probs == probs[0])


def all_kind_states(k, p, rng):
    fmap = FeatureMap("per_arm", k, p=p)
    states = []
    for kind in AGENT_KINDS:
        costs = tuple(rng.uniform(0.5, 2.0, k)) if kind == "BudgetTS" else None
        cfg = AgentConfig(kind, fmap, costs=costs, beta=0.5)
        state = agent_reset(cfg, k)
        x = rng.standard_normal((6, p))
        state = observe(state, x, rng.integers(0, k, 6), rng.standard_normal(6), 0)
        states.append(state)
    return states


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 5), p=st.integers(1, 3))
def test_distributions_are_valid_for_all_agents(seed, k, p):
    rng = np.random.default_rng(seed)
    for state in all_kind_states(k, p, rng):
        x = rng.standard_normal((7, p)) * 3
        probs = act_batch(state, x, 0, rng)
        assert probs.shape == (7, k)
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(0.01, 100.0))
def test_argmax_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    fmap = FeatureMap("per_arm", 3, p=2)
    a = rng.standard_normal((6, 6))
    v = a @ a.T + np.eye(6)
    b = rng.standard_normal(6)
    x = rng.standard_normal((5, 2))
    phis = featurize_all(fmap, x)
    base = with_model(agent_reset(AgentConfig("LinearUCB", fmap, alpha=0.7), 3), DesignState(v, b))
    scaled = with_model(agent_reset(AgentConfig("LinearUCB", fmap, alpha=0.7 * c), 3), DesignState(v, c * b))
    assert np.array_equal(np.argmax(ucb_index(base, phis), 1), np.argmax(ucb_index(scaled, phis), 1))
    base = with_model(agent_reset(AgentConfig("LinearEI", fmap, noise_var=1.0), 3), DesignState(v, b))
    scaled = with_model(agent_reset(AgentConfig("LinearEI", fmap, noise_var=c * c), 3), DesignState(v, c * b))
    assert np.array_equal(np.argmax(ei_index(base, phis), 1), np.argmax(ei_index(scaled, phis), 1))
    assert np.array_equal(exploit(base, x).arms, exploit(scaled, x).arms)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_ei_nonnegative(seed):
    rng = np.random.default_rng(seed)
    fmap = FeatureMap("additive", 4, p=2)
    state = agent_reset(AgentConfig("LinearEI", fmap), 4)
    x = rng.standard_normal((10, 2))
    state = observe(state, x, rng.integers(0, 4, 10), rng.standard_normal(10) * 5, 0)
    assert np.all(ei_index(state, featurize_all(fmap, rng.standard_normal((8, 2)))) >= 0)


def test_optimal_probabilities_estimate():
    probs = optimal_probabilities(two_arm_ts(), [0.0], 0, np.random.default_rng(2), draws=50_000)
    assert abs(probs[1] - stats.norm.cdf(1.0 / np.sqrt(2.0))) < 0.01
    assert probs.sum() == pytest.approx(1.0)


# -- observe ----------------------------------------------------------------------


def test_observe_empty_batch_is_identity():
    state = two_arm_ts()
    assert observe(state, np.zeros((0, 1)), [], [], 0) is state


def test_observe_length_mismatch():
    with pytest.raises(InvalidInputError):
        observe(two_arm_ts(), np.zeros((2, 1)), [0, 1], [1.0], 0)
    with pytest.raises(InvalidInputError):
        observe(two_arm_ts(), np.zeros((1, 1)), [2], [1.0], 0)


@pytest.mark.parametrize("kind", ["LinearTS", "LinearUCB", "MabTS", "Uniform"])
def test_observe_batch_equals_fold_of_singletons(kind):
    rng = np.random.default_rng(9)
    fmap = FeatureMap("per_arm", 3, p=2)
    state = agent_reset(AgentConfig(kind, fmap), 3)
    x = rng.standard_normal((12, 2))
    a = rng.integers(0, 3, 12)
    r = rng.standard_normal(12)
    batch = observe(state, x, a, r, 0)
    fold = state
    for i in range(12):
        fold = observe(fold, x[i : i + 1], a[i : i + 1], r[i : i + 1], 0)
    assert np.array_equal(batch.counts, fold.counts)
    assert np.allclose(batch.sums, fold.sums, atol=1e-12)
    if isinstance(batch.model, GaussianPosterior):
        assert np.allclose(batch.model.theta, fold.model.theta, atol=1e-9)
        assert np.allclose(batch.model.sigma, fold.model.sigma, atol=1e-9)
    elif isinstance(batch.model, DesignState):
        assert np.allclose(batch.model.v, fold.model.v, atol=1e-12)
        assert np.allclose(batch.model.b, fold.model.b, atol=1e-12)


def test_uniform_act_ignores_history():
    state = agent_reset(AgentConfig("Uniform"), 3)
    after = observe(state, np.zeros((3, 1)), [0, 0, 2], [5.0, 4.0, -1.0], 0)
    rng = np.random.default_rng(0)
    assert np.array_equal(act(state, [0.0], 0, rng), act(after, [0.0], 0, rng))


# -- exploit ----------------------------------------------------------------------


def test_exploit_picks_best_posterior_mean():
    state = point_mass("LinearTS", [0.1, 0.2, 0.9])
    assert exploit(state, np.zeros((1, 1))).arms.tolist() == [2]


def test_exploit_ties_go_to_lowest_index():
    state = point_mass("LinearTS", [1.0, 1.0, 0.0])
    assert exploit(state, np.zeros((1, 1))).arms.tolist() == [0]


def test_exploit_per_arm_matches_enumeration():
    rng = np.random.default_rng(4)
    k, p = 4, 3
    theta = rng.standard_normal((k, p))
    fmap = FeatureMap("per_arm", k, p=p)
    state = with_model(agent_reset(AgentConfig("LinearTS", fmap), k), GaussianPosterior(theta.reshape(-1), np.eye(k * p)))
    x = rng.standard_normal((50, p))
    brute = [max(range(k), key=lambda a: (float(xi @ theta[a]), -a)) for xi in x]
    assert exploit(state, x).arms.tolist() == brute


def test_exploit_terminal_averages_epoch_block():
    fmap = FeatureMap("epoch_arm", 2, t_total=4)
    # arm effects (0.3, 0.1); epoch effects do not change the ranking
    theta = np.array([5.0, -2.0, 1.0, 0.0, 0.3, 0.1])
    state = with_model(agent_reset(AgentConfig("LinearTS", fmap), 2), GaussianPosterior(theta, np.eye(6)))
    means = predicted_means(state, np.zeros((1, 1)))
    assert np.allclose(means[0], [1.0 + 0.3, 1.0 + 0.1])
    per_epoch = predicted_means(state, np.zeros((1, 1)), "per_epoch", 1)
    assert np.allclose(per_epoch[0], [-2.0 + 0.3, -2.0 + 0.1])
    assert exploit(state, np.zeros((1, 1))).arms.tolist() == [0]


def test_uniform_exploits_empirical_means():
    state = agent_reset(AgentConfig("Uniform"), 3)
    state = observe(state, np.zeros((4, 1)), [0, 1, 1, 2], [1.0, 3.0, 1.0, 1.5], 0)
    sel = exploit(state, np.zeros((2, 1)))
    assert sel.arms.tolist() == [1, 1] and not sel.fallback


def test_uniform_without_data_falls_back():
    sel = exploit(agent_reset(AgentConfig("Uniform"), 3), np.zeros((2, 1)))
    assert sel.arms.tolist() == [0, 0] and sel.fallback


def test_single_arm_uses_population_average():
    fmap = FeatureMap("per_arm", 2, p=1)
    state = with_model(agent_reset(AgentConfig("LinearTS", fmap), 2), GaussianPosterior(np.array([1.0, -1.0]), np.eye(2)))
    x = np.array([[1.0], [-0.5], [-0.6]])
    assert exploit(state, x).arms.tolist() == [0, 1, 1]
    # average of x is negative, so arm 1 wins for everyone
    assert exploit(state, x, single_arm=True).arms.tolist() == [1, 1, 1]


def test_select_top_k_orders_by_mean():
    state = point_mass("LinearTS", [0.5, 2.0, 1.0, 2.0])
    assert select_top_k(state, np.zeros((1, 1)), 3).tolist() == [1, 3, 2]
    with pytest.raises(InvalidInputError):
        select_top_k(state, np.zeros((1, 1)), 5)
