import numpy as np
import pytest

from batchexp.environments import (
    BootstrapSite,
    Env,
    EnvironmentSpec,
    EpochSchedule,
    LinearGaussian,
    MomentFamily,
    MomentTable,
    Oracle,
    Personalization,
    SiteData,
    augment_arms,
    bootstrap_ate,
    fit_per_arm,
    make_personalization_env,
    sample_costs,
    sign_flip_table,
    synthetic_sites,
    synthetic_units,
)
from batchexp.errors import ConfigError, EnvStateError, InvalidInputError
from batchexp.linear_model import FeatureMap, featurize_all


def linear_spec(t=3, n=5, k=3, p=2, noise=1.0, seed=0, intercept=False):
    fm = FeatureMap("per_arm", k, p)
    theta = np.arange(fm.d, dtype=float) / 3.0
    return EnvironmentSpec(EpochSchedule.constant(t, n, 50), k, LinearGaussian(fm, theta, noise, p, 0.0, intercept), seed)


def small_sites():
    feats = np.array([[1.0, 0.5], [1.0, -1.0], [1.0, 2.0]])
    treated = ([1.0, 2.0, 3.0], [0.0, 0.0, 1.0], [5.0, 4.0])
    control = ([0.0, 1.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0])
    return SiteData(feats, treated, control)


# -- reset / step ----------------------------------------------------------------


def test_reset_batch_shape():
    env = Env(linear_spec(n=5, p=2))
    batch = env.reset()
    assert batch.epoch == 0 and batch.contexts.shape == (5, 2)


def test_same_seed_same_contexts():
    a = Env(linear_spec(), seed=9).reset().contexts
    b = Env(linear_spec(), seed=9).reset().contexts
    c = Env(linear_spec(), seed=10).reset().contexts
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_intercept_column():
    ctx = Env(linear_spec(intercept=True)).reset().contexts
    assert np.all(ctx[:, 0] == 1.0)


def test_site_contexts_are_feature_tables():
    sites = small_sites()
    spec = EnvironmentSpec(EpochSchedule.constant(4, 1, 1), 3, BootstrapSite(sites), 0)
    batch = Env(spec).reset()
    assert batch.contexts.shape == (1, 6)
    assert np.array_equal(batch.contexts[0], sites.features.ravel())


def test_site_env_rejects_batches_above_one():
    spec = EnvironmentSpec(EpochSchedule.constant(2, 3, 1), 3, BootstrapSite(small_sites()), 0)
    with pytest.raises(ConfigError, match="batch_size"):
        spec.validate()


def test_noiseless_outcome_is_linear_mean():
    spec = linear_spec(noise=0.0)
    env = Env(spec)
    batch = env.reset()
    arms = np.array([0, 1, 2, 1, 0])
    out, _ = env.step(arms)
    phi = featurize_all(spec.family.fmap, batch.contexts)[np.arange(5), arms]
    assert np.allclose(out, phi @ spec.family.theta, atol=1e-12)


def test_moment_outcome_distribution():
    table = MomentTable([[0.0, 2.0]], [[1.0, 4.0]])
    spec = EnvironmentSpec(EpochSchedule.constant(1, 40_000, 1), 2, MomentFamily(table), 3)
    env = Env(spec)
    env.reset()
    arms = np.tile([0, 1], 20_000)
    out, nxt = env.step(arms)
    assert nxt is None
    assert abs(out[arms == 1].mean() - 2.0) < 0.05
    assert abs(out[arms == 1].var() - 4.0) < 0.2
    assert abs(out[arms == 0].var() - 1.0) < 0.05


def test_bootstrap_outcome_matches_manual_resample():
    sites = small_sites()
    spec = EnvironmentSpec(EpochSchedule.constant(1, 1, 1), 3, BootstrapSite(sites), 0)
    env = Env(spec, seed=5)
    env.reset()
    out, _ = env.step([2])
    # replay the env's bootstrap stream by hand
    from batchexp import seeding

    rng = seeding.stream(5, seeding.BOOTSTRAP_STREAM)
    t, c = sites.treated[2], sites.control[2]
    manual = t[rng.integers(0, t.size, t.size)].mean() - c[rng.integers(0, c.size, c.size)].mean()
    assert out[0] == pytest.approx(manual, abs=1e-15)


def test_bootstrap_ate_mean_converges_to_true_ate():
    sites = small_sites()
    rng = np.random.default_rng(0)
    draws = [bootstrap_ate(sites, 0, rng) for _ in range(20_000)]
    assert abs(np.mean(draws) - sites.true_ate[0]) < 0.02


def test_wrong_assignment_count():
    env = Env(linear_spec(n=5))
    env.reset()
    with pytest.raises(InvalidInputError):
        env.step([0, 1])


def test_assignment_out_of_range():
    env = Env(linear_spec(n=1))
    env.reset()
    with pytest.raises(InvalidInputError):
        env.step([7])


def test_terminal_after_last_epoch():
    env = Env(linear_spec(t=2, n=1))
    env.reset()
    _, nxt = env.step([0])
    assert nxt.epoch == 1
    _, nxt = env.step([1])
    assert nxt is None and env.terminal
    with pytest.raises(EnvStateError):
        env.step([0])


def test_step_before_reset():
    with pytest.raises(EnvStateError):
        Env(linear_spec()).step([0])


def test_post_experiment_requires_terminal():
    env = Env(linear_spec())
    env.reset()
    with pytest.raises(EnvStateError):
        env.post_experiment()


def test_truncate_ends_run_early():
    env = Env(linear_spec(t=3, n=4))
    env.reset()
    out, nxt = env.step([0, 1], truncate=True)
    assert out.size == 2 and nxt is None and env.terminal
    assert len(env.history) == 1


def test_history_records_each_epoch():
    env = Env(linear_spec(t=3, n=2))
    batch = env.reset()
    while batch is not None:
        _, batch = env.step([0, 1])
    assert [r.epoch for r in env.history] == [0, 1, 2]
    assert all(r.assignments.tolist() == [0, 1] for r in env.history)


def test_outcomes_bitwise_deterministic():
    def run():
        env = Env(linear_spec(t=4, n=3), seed=21)
        batch = env.reset()
        outs = []
        while batch is not None:
            o, batch = env.step([2, 0, 1])
            outs.append(o)
        return np.concatenate(outs)

    assert run().tobytes() == run().tobytes()


def test_unit_noise_independent_of_assignments():
    # unit i sees the same noise draw whatever arm it gets
    spec = linear_spec(t=1, n=6)
    env_a, env_b = Env(spec, 4), Env(spec, 4)
    ctx = env_a.reset().contexts
    env_b.reset()
    arms_a = np.array([0, 0, 0, 1, 1, 1])
    arms_b = np.array([2, 1, 0, 2, 1, 0])
    out_a, _ = env_a.step(arms_a)
    out_b, _ = env_b.step(arms_b)
    phis = featurize_all(spec.family.fmap, ctx)
    theta = spec.family.theta
    res_a = out_a - phis[np.arange(6), arms_a] @ theta
    res_b = out_b - phis[np.arange(6), arms_b] @ theta
    assert np.allclose(res_a, res_b, atol=1e-12)


# -- oracle ------------------------------------------------------------------------


def test_linear_oracle_is_feature_product():
    spec = linear_spec()
    env = Env(spec)
    batch = env.reset()
    means = Oracle(spec).means(batch.contexts, 0)
    assert np.allclose(means, featurize_all(spec.family.fmap, batch.contexts) @ spec.family.theta)


def test_moment_oracle_averages_epochs():
    table = MomentTable([[0.0, 1.0], [2.0, 0.0], [1.0, 5.0]], np.ones((3, 2)))
    spec = EnvironmentSpec(EpochSchedule.constant(3, 1, 2), 2, MomentFamily(table), 0)
    means = Oracle(spec).means(np.zeros((2, 0)))
    assert np.allclose(means, [[1.0, 2.0], [1.0, 2.0]])
    assert np.allclose(Oracle(spec).means(np.zeros((1, 0)), 1), [[2.0, 0.0]])


def test_site_oracle_is_true_ate():
    sites = small_sites()
    spec = EnvironmentSpec(EpochSchedule.constant(1, 1, 1), 3, BootstrapSite(sites), 0)
    assert np.allclose(Oracle(spec).means(np.zeros((1, 6)))[0], sites.true_ate)


def test_oracle_scalar_call():
    spec = linear_spec()
    x = np.array([0.5, -1.0])
    assert Oracle(spec)(x, 2) == pytest.approx(Oracle(spec).means(x[None], 0)[0, 2])


def test_means_by_epoch_matches_per_epoch_calls():
    table = sign_flip_table(k=3, t_total=4)
    spec = EnvironmentSpec(EpochSchedule.constant(4, 1, 1), 3, MomentFamily(table), 0)
    oracle = Oracle(spec)
    epochs = np.array([3, 0, 2, 2, 1])
    got = oracle.means_by_epoch(np.zeros((5, 0)), epochs)
    assert np.array_equal(got, table.means[epochs])


# -- spec validation ------------------------------------------------------------------


def test_validation_names_field():
    fm = FeatureMap("per_arm", 3, 2)
    spec = EnvironmentSpec(EpochSchedule.constant(2, 1), 3, LinearGaussian(fm, np.zeros(5), 1.0, 2), 0)
    with pytest.raises(ConfigError, match="environment.theta"):
        spec.validate()


def test_schedule_validation():
    with pytest.raises(ConfigError):
        EpochSchedule(2, (1,))
    with pytest.raises(ConfigError):
        EpochSchedule.constant(2, 0)


def test_moment_table_rejects_zero_variance():
    with pytest.raises(InvalidInputError):
        MomentTable([[0.0]], [[0.0]])


# -- constructions --------------------------------------------------------------------


def test_augment_zero_scale_copies_treatment():
    table = MomentTable([[0.0, 1.0], [0.5, 2.0], [0.2, 0.5]], [[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]])
    out = augment_arms(table, 5, 0.0, np.random.default_rng(0))
    assert out.k == 5
    for j in range(2, 5):
        assert np.array_equal(out.means[:, j], table.means[:, 1])
        assert np.array_equal(out.vars[:, j], table.vars[:, 1])


def test_augment_no_op_and_range():
    table = MomentTable(np.zeros((3, 2)), np.ones((3, 2)))
    assert augment_arms(table, 2, 0.5, np.random.default_rng(0)) is table
    with pytest.raises(InvalidInputError):
        augment_arms(table, 1, 0.5, np.random.default_rng(0))


def test_augment_to_ten_arms():
    table = MomentTable(np.random.default_rng(1).standard_normal((6, 2)), np.ones((6, 2)))
    out = augment_arms(table, 10, 0.5, np.random.default_rng(2))
    assert out.means.shape == (6, 10)


def test_augment_perturbation_scale():
    rng = np.random.default_rng(3)
    col = rng.standard_normal(8)
    table = MomentTable(np.column_stack([np.zeros(8), col]), np.ones((8, 2)))
    out = augment_arms(table, 4002, 0.5, np.random.default_rng(4))
    noise = out.means[:, 2:] - col[:, None]
    assert abs(noise.std() - 0.5 * col.std(ddof=1)) < 0.02 * col.std(ddof=1)


def test_sign_flip_best_arm_alternates():
    table = sign_flip_table(k=5, t_total=6, gap=0.5, advantage=0.1)
    best = table.means.argmax(axis=1)
    assert best.tolist() == [0, 1, 0, 1, 0, 1]
    assert table.averaged_means().argmax() == 1
    lead = sign_flip_table(k=5, t_total=6, gap=0.5, advantage=0.1, lead=1)
    assert lead.means.argmax(axis=1).tolist() == [1, 0, 1, 0, 1, 0]


def test_personalization_exact_interpolation():
    rng = np.random.default_rng(0)
    x = np.column_stack([np.ones(10), rng.standard_normal(10)])
    coef = np.array([0.5, -2.0])
    units = [(x[i], 0, float(x[i] @ coef)) for i in range(10)]
    units += [(x[i], 1, 0.0) for i in range(10)]
    spec = make_personalization_env(units, 2, 0.0, EpochSchedule.constant(1, 10, 5))
    env = Env(spec)
    batch = env.reset()
    out, _ = env.step(np.zeros(10, dtype=int))
    assert np.allclose(out, batch.contexts @ coef, atol=1e-6)


def test_personalization_six_arms_and_dense_solve():
    units, _ = synthetic_units(600, 3, 6, np.random.default_rng(1), noise_sd=0.3)
    spec = make_personalization_env(units, 6, 1.0, EpochSchedule.constant(2, 4))
    coefs = spec.family.coefs
    assert coefs.shape == (6, 3)
    x = np.array([u[0] for u in units])
    arms = np.array([u[1] for u in units])
    y = np.array([u[2] for u in units])
    for a in range(6):
        xa, ya = x[arms == a], y[arms == a]
        direct = np.linalg.solve(xa.T @ xa + 1e-6 * np.eye(3), xa.T @ ya)
        assert np.allclose(coefs[a], direct, atol=1e-8)


def test_personalization_contexts_resample_pool():
    units, _ = synthetic_units(50, 2, 2, np.random.default_rng(2))
    spec = make_personalization_env(units, 2, 1.0, EpochSchedule.constant(1, 30))
    pool = {tuple(u[0]) for u in units}
    ctx = Env(spec).reset().contexts
    assert all(tuple(row) in pool for row in ctx)
    assert isinstance(spec.family, Personalization)


def test_underdetermined_arm_names_the_arm():
    x = np.ones((3, 2))
    with pytest.raises(ConfigError, match="arm 1"):
        fit_per_arm(x, np.array([0, 0, 1]), np.zeros(3), 2)


def test_sample_costs_truncated():
    costs = sample_costs(5000, np.random.default_rng(0), mean=2.0, var=10.0, floor=1.0)
    assert costs.min() >= 1.0


def test_sample_costs_moments():
    costs = sample_costs(100_000, np.random.default_rng(1))
    assert abs(costs.mean() - 20.0) < 0.05
    assert abs(costs.var() - 10.0) < 0.2


def test_synthetic_sites_shapes():
    sites = synthetic_sites(7, 3, np.random.default_rng(0), units_per_arm=20)
    assert sites.features.shape == (7, 3) and np.all(sites.features[:, 0] == 1.0)
    assert all(t.size == 20 for t in sites.treated)
