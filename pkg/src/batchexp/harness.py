"""Config-driven replication runner.

One replication runs the epoch loop

    reset -> [act per unit -> constraint mask -> sample -> step -> observe] x T
          -> exploit over the post-experiment population -> score

and :func:`run_benchmark` repeats it ``R`` times per agent, then aggregates.

Seeding: the environment of replication ``r`` is seeded from
``(master, r)`` so every agent faces the same draws of contexts and noise
streams; each agent's own randomness is seeded from
``(master, hash(agent name), r)``. Reordering, adding or removing agents
therefore never changes another agent's numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .agents import (
    AGENT_KINDS,
    BUDGET_TS,
    LINEAR_TS,
    MAB_TS,
    MAB_TTTS,
    UNIFORM,
    AgentConfig,
    AgentState,
    act_batch,
    agent_reset,
    exploit,
    observe,
    select_top_k,
)
from .design import DESIGN_METHODS, evaluate_design
from .environments import (
    FAMILY_NAMES,
    BootstrapSite,
    EnvironmentSpec,
    EpochRecord,
    EpochSchedule,
    Env,
    LinearGaussian,
    MomentFamily,
    MomentTable,
    Oracle,
    augment_arms,
    make_personalization_env,
    sample_costs,
    sign_flip_table,
    synthetic_sites,
    synthetic_units,
)
from .errors import ConfigError, InvalidInputError
from .ingestion import parse_moment_csv, parse_units_csv, units_to_personalization, units_to_sites
from .linear_model import (
    FEATURE_KINDS,
    PER_ARM,
    FeatureMap,
    GaussianPosterior,
    NoiseModel,
    _factor,
    featurize_all,
)
from .objectives import (
    BEST_ARM_ID_RATE,
    BUDGET,
    CUMULATIVE_REGRET,
    OBJECTIVE_NAMES,
    POLICY_REGRET,
    SIGN_GENERALIZATION,
    SIMPLE_REGRET,
    SINGLE_SAMPLE,
    TOP_K_REGRET,
    Budget,
    RunRecord,
    SingleSample,
    Usage,
    apply_constraints,
    best_arm_id_rate,
    constraint_violations,
    cumulative_regret,
    policy_regret,
    simple_regret,
    top_k_regret,
)

BEST_ARM = "best_arm"
PERSONALIZED = "personalized"
EXTERNAL_VALIDITY = "external_validity"
REPORT_HEADER = ("agent", "objective", "mean", "se", "ci_lo", "ci_hi", "ratio_to_uniform")
Z95 = 1.96
INSTANCE_STREAM = 0x696E7374  # "inst"


@dataclass(frozen=True)
class Objective:
    name: str
    k: Optional[int] = None

    @property
    def label(self) -> str:
        return f"{self.name}@{self.k}" if self.name == TOP_K_REGRET else self.name


def score(record: RunRecord, objective: Objective) -> float:
    name = objective.name
    if name == SIMPLE_REGRET:
        return simple_regret(record)
    if name == POLICY_REGRET:
        return policy_regret(record)
    if name == CUMULATIVE_REGRET:
        return cumulative_regret(record)
    if name == TOP_K_REGRET:
        return top_k_regret(record, objective.k)
    if name == BEST_ARM_ID_RATE:
        return best_arm_id_rate([record])
    raise ConfigError(f"objective {name!r} does not apply to bandit runs", "objectives")


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if probs.shape[0] == 1:
        row = probs[0].tolist()
        u = rng.random() * sum(row)
        acc = 0.0
        for a, q in enumerate(row[:-1]):
            acc += q
            if u < acc:
                return np.array([a], dtype=np.int64)
        return np.array([len(row) - 1], dtype=np.int64)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.minimum((u[:, None] >= cum).sum(axis=1), probs.shape[1] - 1)


def run_replication(
    spec: EnvironmentSpec,
    config: AgentConfig,
    objectives: Sequence[Objective] = (),
    constraints: Sequence = (),
    seed: int = 0,
    env_seed: Optional[int] = None,
    selection: str = BEST_ARM,
    epoch_mode: str = "terminal",
):
    """One full experiment; returns ``(RunRecord, {objective label: value})``."""
    env = Env(spec, seeding.derive(seed, seeding.ENV_STREAM) if env_seed is None else env_seed)
    k = spec.k
    state = agent_reset(config, k)
    if state.fmap is not None:
        need = state.fmap.context_dim
        if need is not None and need != spec.context_dim:
            raise ConfigError(
                f"agent features expect contexts of length {need}, environment produces {spec.context_dim}",
                "agent.features",
            )
        if state.fmap.t_total and state.fmap.t_total < spec.schedule.t_total:
            raise ConfigError("temporal features shorter than the schedule", "agent.features")
    policy_rng = seeding.stream(seed, seeding.POLICY_STREAM)
    assign_rng = seeding.stream(seed, seeding.ASSIGN_STREAM)
    usage = Usage.empty(k, spec.costs) if constraints else None
    stopped = False

    batch = env.reset()
    while batch is not None:
        t = batch.epoch
        ctx = batch.contexts
        phis = featurize_all(state.fmap, ctx, t) if state.fmap is not None else None
        probs = act_batch(state, ctx, t, policy_rng, phis)
        if usage is None:
            arms = _sample_categorical(probs, assign_rng)
        else:
            chosen = []
            for p in probs:
                p = apply_constraints(constraints, p, usage)
                if p is None:
                    stopped = True
                    break
                a = int(_sample_categorical(p[None, :], assign_rng)[0])
                usage.record(a)
                chosen.append(a)
            arms = np.array(chosen, dtype=np.int64)
        outcomes, nxt = env.step(arms, truncate=stopped)
        m = arms.size
        state = observe(state, ctx[:m], arms, outcomes, t, None if phis is None else phis[:m])
        batch = nxt

    return _conclude(env, state, objectives, constraints, usage, selection, epoch_mode, stopped)


def _conclude(env, state, objectives, constraints, usage, selection, epoch_mode, stopped):
    post_ctx, oracle = env.post_experiment()
    final = exploit(state, post_ctx, epoch_mode, single_arm=(selection == BEST_ARM))
    top = None
    for obj in objectives:
        if obj.name == TOP_K_REGRET:
            top = select_top_k(state, post_ctx, obj.k, epoch_mode)
    record = RunRecord(
        history=tuple(env.history),
        post_contexts=post_ctx,
        final_assignments=final.arms,
        oracle=oracle,
        violations=constraint_violations(constraints, usage) if usage is not None else (),
        selected_set=top,
        stopped_early=stopped,
    )
    return record, {obj.label: score(record, obj) for obj in objectives}


# -- lockstep replications ------------------------------------------------------------

LOCKSTEP_KINDS = (LINEAR_TS, MAB_TS)
LOCKSTEP_BLOCK = 64


def lockstep_eligible(spec: EnvironmentSpec, config: AgentConfig, constraints=()) -> bool:
    """Whether :func:`run_replications` may advance replications together.

    Covers posterior sampling with one unit per epoch and no constraints,
    which is where the per-step Python overhead dominates.
    """
    if constraints or config.kind not in LOCKSTEP_KINDS:
        return False
    if isinstance(spec.family, BootstrapSite):
        return False
    if any(n != 1 for n in spec.schedule.batch_sizes):
        return False
    fmap = agent_reset(config, spec.k).fmap
    return fmap.d >= 2 and (fmap.context_dim is None or fmap.context_dim == spec.context_dim)


def _batched_factor(sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return np.stack([_factor(s) for s in sigma])


def _lockstep_block(specs, config, objectives, seeds, env_seeds, selection, epoch_mode):
    r_n = len(specs)
    k = specs[0].k
    t_n = specs[0].schedule.t_total
    states = [agent_reset(config, k) for _ in range(r_n)]
    fmap = states[0].fmap
    d = fmap.d
    s2 = config.noise_var

    envs = [Env(sp, es) for sp, es in zip(specs, env_seeds)]
    ctx = []
    means = np.empty((r_n, t_n, k))
    sd = np.empty((r_n, t_n, k))
    epochs = np.arange(t_n)
    for i, env in enumerate(envs):
        env.reset()
        x, z = env._unit_draws()
        ctx.append(x)
        means[i] = Oracle(env.spec).means_by_epoch(x, epochs)
        fam = env.spec.family
        if isinstance(fam, MomentFamily):
            sd[i] = np.sqrt(fam.table.vars)
        else:
            sd[i] = math.sqrt(fam.noise_var)
        sd[i] *= z[:, None]
    ctx = np.stack(ctx)  # (R, T, p)
    policy = [seeding.stream(s, seeding.POLICY_STREAM) for s in seeds]

    theta = np.stack([st.model.theta for st in states])
    sigma = np.stack([st.model.sigma for st in states])
    arms = np.empty((r_n, t_n), dtype=np.int64)
    rewards = np.empty((r_n, t_n))
    rows = np.arange(r_n)
    chunk = 256
    for lo in range(0, t_n, chunk):
        hi = min(lo + chunk, t_n)
        z = np.stack([g.standard_normal((hi - lo, d)) for g in policy])
        for t in range(lo, hi):
            phis = featurize_all(fmap, ctx[:, t], t)  # (R, K, d)
            draw = theta + np.einsum("rij,rj->ri", _batched_factor(sigma), z[:, t - lo])
            a = np.argmax(np.einsum("rkd,rd->rk", phis, draw), axis=1)
            y = means[rows, t, a] + sd[rows, t, a]
            arms[:, t] = a
            rewards[:, t] = y
            f = phis[rows, a]
            v = np.einsum("rij,rj->ri", sigma, f)
            denom = s2 + np.einsum("ri,ri->r", v, f)
            resid = (y - np.einsum("ri,ri->r", f, theta)) / denom
            theta = theta + v * resid[:, None]
            u = v / np.sqrt(denom)[:, None]
            sigma = sigma - u[:, :, None] * u[:, None, :]

    out = []
    for i, env in enumerate(envs):
        counts = np.bincount(arms[i], minlength=k).astype(np.int64)
        sums = np.bincount(arms[i], weights=rewards[i], minlength=k)
        state = AgentState(config, k, fmap, GaussianPosterior(theta[i], sigma[i]), counts, sums)
        env._close(
            EpochRecord(t, ctx[i, t : t + 1], arms[i, t : t + 1], rewards[i, t : t + 1])
            for t in range(t_n)
        )
        out.append(_conclude(env, state, objectives, (), None, selection, epoch_mode, False))
    return out


def run_replications(
    specs: Sequence[EnvironmentSpec],
    config: AgentConfig,
    objectives: Sequence[Objective] = (),
    constraints: Sequence = (),
    seeds: Sequence[int] = (),
    env_seeds: Sequence[int] = (),
    selection: str = BEST_ARM,
    epoch_mode: str = "terminal",
    lockstep: Optional[bool] = None,
):
    """Independent replications of one agent; returns a list of ``(RunRecord, scores)``.

    Replication ``i`` uses ``specs[i]``, ``seeds[i]`` and ``env_seeds[i]`` and
    is the same experiment :func:`run_replication` would run. When every
    replication is eligible (see :func:`lockstep_eligible`) they advance
    together with stacked linear algebra, in fixed blocks so results do not
    depend on how replications are grouped by the caller. ``lockstep=False``
    forces the one-at-a-time path.
    """
    if not len(specs) == len(seeds) == len(env_seeds):
        raise InvalidInputError("need one spec, seed and environment seed per replication")
    if lockstep is None:
        lockstep = bool(specs) and all(lockstep_eligible(sp, config, constraints) for sp in specs)
        lockstep = lockstep and len({(sp.k, sp.schedule.t_total) for sp in specs}) == 1
    if not lockstep:
        return [
            run_replication(sp, config, objectives, constraints, s, es, selection, epoch_mode)
            for sp, s, es in zip(specs, seeds, env_seeds)
        ]
    out = []
    for lo in range(0, len(specs), LOCKSTEP_BLOCK):
        hi = lo + LOCKSTEP_BLOCK
        out.extend(
            _lockstep_block(specs[lo:hi], config, objectives, seeds[lo:hi], env_seeds[lo:hi], selection, epoch_mode)
        )
    return out


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class AgentEntry:
    name: str
    config: AgentConfig
    features: Optional[str] = None
    explicit: frozenset = frozenset()


@dataclass(frozen=True)
class BenchmarkConfig:
    task: str
    environment: dict
    agents: tuple
    objectives: tuple
    constraints: tuple = ()
    replications: int = 1
    seed: int = 0
    output: Optional[str] = None
    selection: Optional[str] = None
    epoch_mode: str = "terminal"
    normalize: bool = True
    ratio_mode: str = "ratio_of_means"
    methods: tuple = ()
    budget: Optional[int] = None
    base_dir: str = "."
    workers: int = 1


def _req(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError("missing required field", f"{path}.{key}")
    return d[key]


def _int_field(d, key, path, default=None, minimum=None):
    val = d.get(key, default)
    if val is None:
        raise ConfigError("missing required field", f"{path}.{key}")
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"expected an integer, got {val!r}", f"{path}.{key}")
    if minimum is not None and val < minimum:
        raise ConfigError(f"must be >= {minimum}, got {val}", f"{path}.{key}")
    return val


def _objective(entry, i) -> Objective:
    path = f"objectives[{i}]"
    if isinstance(entry, str):
        entry = {"name": entry}
    if not isinstance(entry, dict):
        raise ConfigError("expected a name or an object", path)
    name = _req(entry, "name", path)
    if name not in OBJECTIVE_NAMES:
        raise ConfigError(f"unknown objective {name!r}", f"{path}.name")
    k = None
    if name == TOP_K_REGRET:
        k = _int_field(entry, "k", path, minimum=1)
    return Objective(name, k)


def _constraint(entry, i):
    path = f"constraints[{i}]"
    if isinstance(entry, str):
        entry = {"kind": entry}
    kind = _req(entry, "kind", path)
    if kind == SINGLE_SAMPLE:
        return SingleSample()
    if kind == BUDGET:
        total = _req(entry, "total", path)
        try:
            return Budget(float(total))
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), f"{path}.total") from None
    raise ConfigError(f"unknown constraint {kind!r}", f"{path}.kind")


_AGENT_FIELDS = {"beta", "alpha", "ts_draws", "costs", "noise_var", "prior_var", "ridge", "per_batch", "alpha_schedule"}


def _agent(entry, i) -> AgentEntry:
    path = f"agents[{i}]"
    if isinstance(entry, str):
        entry = {"kind": entry}
    if not isinstance(entry, dict):
        raise ConfigError("expected a kind name or an object", path)
    kind = _req(entry, "kind", path)
    if kind not in AGENT_KINDS:
        raise ConfigError(f"unknown agent kind {kind!r}", f"{path}.kind")
    unknown = set(entry) - _AGENT_FIELDS - {"kind", "name", "features"}
    if unknown:
        raise ConfigError(f"unknown fields {sorted(unknown)}", path)
    features = entry.get("features")
    if features not in (None, "auto") and features not in FEATURE_KINDS:
        raise ConfigError(f"unknown feature map {features!r}", f"{path}.features")
    params = {key: entry[key] for key in _AGENT_FIELDS if key in entry}
    for key in ("costs", "alpha_schedule"):
        if key in params:
            params[key] = tuple(params[key])
    try:
        cfg = AgentConfig(kind, **params)
    except ConfigError as exc:
        raise ConfigError(str(exc), path) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from None
    return AgentEntry(entry.get("name", kind), cfg, None if features == "auto" else features, frozenset(params))


def parse_config(doc: dict, base_dir: str = ".") -> BenchmarkConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    task = doc.get("task", "bandit")
    env = _req(doc, "environment", "config")
    if not isinstance(env, dict):
        raise ConfigError("expected an object", "environment")
    fam = _req(env, "family", "environment")
    if fam not in FAMILY_NAMES:
        raise ConfigError(f"unknown family {fam!r}", "environment.family")
    objectives = tuple(_objective(o, i) for i, o in enumerate(doc.get("objectives", [])))
    if not objectives:
        raise ConfigError("at least one objective is required", "objectives")
    reps = _int_field(doc, "replications", "config", 1, minimum=1)
    seed = _int_field(doc, "seed", "config", 0, minimum=0)
    workers = _int_field(doc, "workers", "config", 1, minimum=1)
    ratio_mode = doc.get("ratio_mode", "ratio_of_means")
    if ratio_mode not in ("ratio_of_means", "per_replication"):
        raise ConfigError(f"unknown ratio mode {ratio_mode!r}", "ratio_mode")
    epoch_mode = doc.get("epoch_mode", "terminal")
    if epoch_mode not in ("terminal", "per_epoch"):
        raise ConfigError(f"unknown epoch mode {epoch_mode!r}", "epoch_mode")
    common = dict(
        task=task,
        environment=env,
        objectives=objectives,
        replications=reps,
        seed=seed,
        output=doc.get("output"),
        normalize=bool(doc.get("normalize", True)),
        ratio_mode=ratio_mode,
        epoch_mode=epoch_mode,
        base_dir=str(base_dir),
        workers=workers,
    )
    if task == EXTERNAL_VALIDITY:
        if fam != "bootstrap_site":
            raise ConfigError("external validity needs a bootstrap_site environment", "environment.family")
        methods = tuple(doc.get("methods", DESIGN_METHODS))
        for i, m in enumerate(methods):
            if m not in DESIGN_METHODS:
                raise ConfigError(f"unknown design method {m!r}", f"methods[{i}]")
        if not methods:
            raise ConfigError("at least one method is required", "methods")
        for o in objectives:
            if o.name != SIGN_GENERALIZATION:
                raise ConfigError(f"external validity is scored by {SIGN_GENERALIZATION} only", "objectives")
        budget = _int_field(doc, "budget", "config", minimum=1)
        return BenchmarkConfig(agents=(), methods=methods, budget=budget, **common)
    for o in objectives:
        if o.name == SIGN_GENERALIZATION:
            raise ConfigError(f"{SIGN_GENERALIZATION} needs task {EXTERNAL_VALIDITY!r}", "objectives")
    agents = [_agent(a, i) for i, a in enumerate(doc.get("agents", []))]
    if not agents:
        raise ConfigError("at least one agent is required", "agents")
    names = [a.name for a in agents]
    if len(set(names)) != len(names):
        raise ConfigError("agent names must be unique", "agents")
    if common["normalize"] and not any(a.config.kind == UNIFORM for a in agents):
        agents.append(AgentEntry(UNIFORM, AgentConfig(UNIFORM)))
    constraints = tuple(_constraint(c, i) for i, c in enumerate(doc.get("constraints", [])))
    selection = doc.get("selection")
    if selection is None:
        selection = BEST_ARM if fam in ("moment_table", "bootstrap_site") else PERSONALIZED
    if selection not in (BEST_ARM, PERSONALIZED):
        raise ConfigError(f"unknown selection mode {selection!r}", "selection")
    if selection == PERSONALIZED and any(o.name in (SIMPLE_REGRET, TOP_K_REGRET) for o in objectives):
        raise ConfigError("simple and top-k regret need selection 'best_arm'", "selection")
    return BenchmarkConfig(agents=tuple(agents), constraints=constraints, selection=selection, **common)


def _schedule(env: dict, default_t: Optional[int] = None) -> EpochSchedule:
    path = "environment"
    post_n = _int_field(env, "post_n", path, 1000, minimum=1)
    if "batch_sizes" in env:
        sizes = env["batch_sizes"]
        return EpochSchedule(len(sizes), tuple(sizes), post_n)
    t = _int_field(env, "t_total", path, default_t, minimum=1)
    n = _int_field(env, "batch_size", path, 1, minimum=1)
    return EpochSchedule.constant(t, n, post_n)


def _path(cfg: BenchmarkConfig, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(cfg.base_dir, p)


def build_environment(cfg: BenchmarkConfig, env_seed: int, instance_seed: int) -> EnvironmentSpec:
    """Environment spec for one replication.

    Synthetic instances (random coefficients, sites, costs) are drawn from
    ``instance_seed``; with ``"redraw": true`` they come from ``env_seed``
    instead, i.e. a fresh instance each replication.
    """
    env = cfg.environment
    fam = env["family"]
    inst_rng = np.random.default_rng(env_seed if env.get("redraw") else instance_seed)
    try:
        if fam == "linear_gaussian":
            k = _int_field(env, "k", "environment", minimum=1)
            p = _int_field(env, "p", "environment", 0, minimum=0)
            sched = _schedule(env)
            kind = env.get("features", PER_ARM)
            if kind not in FEATURE_KINDS:
                raise ConfigError(f"unknown feature map {kind!r}", "environment.features")
            fmap = FeatureMap(kind, k, p, sched.t_total)
            if "theta" in env:
                theta = np.asarray(env["theta"], dtype=float)
            else:
                theta = float(env.get("theta_scale", 1.0)) * inst_rng.standard_normal(fmap.d)
            fam_obj = LinearGaussian(
                fmap,
                theta,
                float(env.get("noise_var", 1.0)),
                p,
                float(env.get("context_mean", 0.0)),
                bool(env.get("intercept", False)),
            )
            spec = EnvironmentSpec(sched, k, fam_obj, env_seed)
        elif fam == "moment_table":
            table = _moment_table(cfg, env, inst_rng)
            sched = _schedule(env, table.t_total)
            spec = EnvironmentSpec(sched, table.k, MomentFamily(table), env_seed)
        elif fam == "bootstrap_site":
            sites = _sites(cfg, env, inst_rng)
            t = _int_field(env, "t_total", "environment", minimum=1)
            sched = EpochSchedule.constant(t, 1, _int_field(env, "post_n", "environment", 1, minimum=1))
            costs = _costs(env, sites.k, inst_rng)
            spec = EnvironmentSpec(sched, sites.k, BootstrapSite(sites, costs), env_seed)
        else:
            k = _int_field(env, "k", "environment", minimum=2)
            sched = _schedule(env)
            noise = NoiseModel(float(env.get("noise_var", 1.0)))
            if "units_csv" in env:
                table = parse_units_csv(_path(cfg, env["units_csv"]))
                spec = units_to_personalization(table, k, noise, sched, env_seed, bool(env.get("intercept", True)))
            else:
                syn = env.get("synthetic", {})
                units, _ = synthetic_units(
                    _int_field(syn, "n_units", "environment.synthetic", 2000, minimum=1),
                    _int_field(syn, "p", "environment.synthetic", 3, minimum=1),
                    k,
                    inst_rng,
                    coef_scale=float(syn.get("coef_scale", 1.0)),
                    noise_sd=float(syn.get("noise_sd", 0.0)),
                )
                spec = make_personalization_env(units, k, noise, sched, env_seed)
        spec.validate()
    except InvalidInputError as exc:
        raise ConfigError(str(exc), "environment") from None
    return spec


def _moment_table(cfg, env, rng) -> MomentTable:
    if "csv" in env:
        groups = parse_moment_csv(_path(cfg, env["csv"]))
        key = (env.get("experiment_id"), env.get("metric_id"))
        if key == (None, None):
            data = next(iter(groups.values()))
        elif key in groups:
            data = groups[key]
        else:
            raise ConfigError(f"no group {key} in {env['csv']}", "environment.experiment_id")
        table = data.table
    elif "means" in env:
        table = MomentTable(np.asarray(env["means"], dtype=float), np.asarray(_req(env, "vars", "environment"), dtype=float))
    else:
        syn = env.get("synthetic", {})
        table = sign_flip_table(
            k=_int_field(syn, "k", "environment.synthetic", env.get("k", 5), minimum=2),
            t_total=_int_field(syn, "t_total", "environment.synthetic", env.get("t_total", 10), minimum=1),
            gap=float(syn.get("gap", 0.5)),
            advantage=float(syn.get("advantage", 0.1)),
            variance=float(syn.get("variance", 1.0)),
            base=float(syn.get("base", -0.2)),
            lead=_int_field(syn, "lead", "environment.synthetic", 0, minimum=0),
        )
    if "augment_to" in env:
        table = augment_arms(
            table,
            _int_field(env, "augment_to", "environment", minimum=1),
            float(env.get("augment_scale", 0.5)),
            rng,
            int(env.get("treatment_arm", 1)),
        )
    return table


def _sites(cfg, env, rng):
    if "units_csv" in env:
        table = parse_units_csv(_path(cfg, env["units_csv"]))
        sites, _ = units_to_sites(table, str(env.get("treated_label", "1")), bool(env.get("intercept", True)))
        return sites
    syn = env.get("synthetic", {})
    return synthetic_sites(
        _int_field(env, "k", "environment", minimum=2),
        _int_field(syn, "p", "environment.synthetic", 3, minimum=1),
        rng,
        units_per_arm=_int_field(syn, "units_per_arm", "environment.synthetic", 50, minimum=2),
        noise_sd=float(syn.get("noise_sd", 1.0)),
    )


def _costs(env, k, rng):
    spec = env.get("costs")
    if spec is None:
        return None
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    return sample_costs(k, rng, float(spec.get("mean", 20.0)), float(spec.get("variance", 10.0)), float(spec.get("floor", 1.0)))


def agent_for_env(entry: AgentEntry, spec: EnvironmentSpec) -> AgentConfig:
    """Fill in environment-derived defaults: feature map, noise variance, costs."""
    cfg = entry.config
    changes = {}
    if cfg.kind not in (UNIFORM, MAB_TS, MAB_TTTS) and cfg.fmap is None:
        changes["fmap"] = spec.feature_map(entry.features)
    if cfg.kind in (MAB_TS, MAB_TTTS) and entry.features not in (None, "arm_one_hot"):
        raise ConfigError(f"{cfg.kind} always uses arm_one_hot features", f"agents.{entry.name}.features")
    if cfg.kind == BUDGET_TS and cfg.costs is None:
        if spec.costs is None:
            raise ConfigError("BudgetTS needs costs from the agent or the environment", f"agents.{entry.name}.costs")
        changes["costs"] = tuple(spec.costs)
    if "noise_var" not in entry.explicit:
        changes["noise_var"] = spec.nominal_noise_var
    if not changes:
        return cfg
    return replace(cfg, **changes)


# -- benchmark -----------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    agent: str
    objective: str
    mean: float
    se: float
    ci_lo: float
    ci_hi: float
    ratio_to_uniform: float


@dataclass(frozen=True, eq=False)
class AggregateReport:
    rows: tuple
    values: dict = field(default_factory=dict)  # (agent, objective) -> per-replication array

    def row(self, agent: str, objective: str) -> ReportRow:
        for r in self.rows:
            if r.agent == agent and r.objective == objective:
                return r
        raise KeyError((agent, objective))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.agent, r.objective] + [_fmt(getattr(r, f)) for f in REPORT_HEADER[2:]])
        return buf.getvalue()


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def summarize(values: np.ndarray) -> tuple:
    """``(mean, se, ci_lo, ci_hi)`` with a normal 95% interval."""
    v = np.asarray(values, dtype=float)
    mean = float(np.mean(v))
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return mean, se, mean - Z95 * se, mean + Z95 * se


def replication_seeds(master: int, agent_name: str, rep: int) -> tuple:
    """``(agent seed, environment seed)`` for one replication."""
    return (
        seeding.derive(master, seeding.name_hash(agent_name), rep),
        seeding.derive(master, seeding.ENV_STREAM, rep),
    )


def _bandit_block(cfg: BenchmarkConfig, entry: AgentEntry, reps: range) -> list:
    instance_seed = seeding.derive(cfg.seed, INSTANCE_STREAM)
    specs, seeds, env_seeds = [], [], []
    for rep in reps:
        agent_seed, env_seed = replication_seeds(cfg.seed, entry.name, rep)
        specs.append(build_environment(cfg, env_seed, instance_seed))
        seeds.append(agent_seed)
        env_seeds.append(env_seed)
    agent_cfg = agent_for_env(entry, specs[0])
    if any(agent_for_env(entry, sp) != agent_cfg for sp in specs[1:]):
        runs = [
            run_replication(sp, agent_for_env(entry, sp), cfg.objectives, cfg.constraints, s, es, cfg.selection, cfg.epoch_mode)
            for sp, s, es in zip(specs, seeds, env_seeds)
        ]
    else:
        runs = run_replications(
            specs, agent_cfg, cfg.objectives, cfg.constraints, seeds, env_seeds, cfg.selection, cfg.epoch_mode
        )
    out = []
    for rep, (record, scores) in zip(reps, runs):
        if record.violations:
            raise RuntimeError(f"constraint violated in replication {rep}: {record.violations}")
        out.append(scores)
    return out


def _one_design_run(cfg: BenchmarkConfig, method: str, rep: int) -> dict:
    agent_seed, env_seed = replication_seeds(cfg.seed, method, rep)
    spec = build_environment(cfg, env_seed, seeding.derive(cfg.seed, INSTANCE_STREAM))
    sites = spec.family.sites
    budget = cfg.budget
    if budget >= sites.k:
        raise ConfigError(f"budget must leave at least one unsampled site (have {sites.k})", "budget")
    outcome = evaluate_design(sites, budget, method, np.random.default_rng(agent_seed))
    return {o.label: outcome.score for o in cfg.objectives}


def _task(args):
    cfg, who, reps = args
    if cfg.task == EXTERNAL_VALIDITY:
        return [_one_design_run(cfg, who, rep) for rep in reps]
    return _bandit_block(cfg, who, reps)


def check_output_path(path: str) -> None:
    """Fail fast (OSError) if ``path`` cannot be written."""
    parent = os.path.dirname(os.path.abspath(path)) or "."
    if not os.path.isdir(parent):
        raise OSError(f"output directory {parent} does not exist")
    if os.path.isdir(path):
        raise OSError(f"output path {path} is a directory")
    if not os.access(parent, os.W_OK) or (os.path.exists(path) and not os.access(path, os.W_OK)):
        raise OSError(f"output path {path} is not writable")


def run_benchmark(cfg: BenchmarkConfig, output: Optional[str] = None) -> AggregateReport:
    out_path = output or (cfg.output and _path(cfg, cfg.output))
    if out_path:
        check_output_path(out_path)
    if cfg.task == EXTERNAL_VALIDITY:
        who = list(cfg.methods)
        names = who
        base = "uniform" if "uniform" in names else None
    else:
        who = list(cfg.agents)
        names = [a.name for a in who]
        base = next((a.name for a in who if a.config.kind == UNIFORM), None)
    n = cfg.replications
    jobs = [(cfg, w, range(lo, min(lo + LOCKSTEP_BLOCK, n))) for w in who for lo in range(0, n, LOCKSTEP_BLOCK)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            blocks = list(pool.map(_task, jobs))
    else:
        blocks = [_task(j) for j in jobs]
    results = [res for block in blocks for res in block]

    values = {}
    labels = [o.label for o in cfg.objectives]
    for i, name in enumerate(names):
        chunk = results[i * cfg.replications:(i + 1) * cfg.replications]
        for lab in labels:
            values[(name, lab)] = np.array([res[lab] for res in chunk], dtype=float)

    rows = []
    for name in names:
        for lab in labels:
            v = values[(name, lab)]
            mean, se, lo, hi = summarize(v)
            ratio = math.nan
            if base is not None:
                u = values[(base, lab)]
                if cfg.ratio_mode == "ratio_of_means":
                    umean = float(np.mean(u))
                    if umean != 0:
                        ratio = 1.0 if name == base else mean / umean
                elif np.all(u != 0):
                    ratio = float(np.mean(v / u))
            rows.append(ReportRow(name, lab, mean, se, lo, hi, ratio))
    report = AggregateReport(tuple(rows), values)
    if out_path:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    return report


def load_config(path: str) -> BenchmarkConfig:
    """Read and validate a JSON config; relative paths resolve against its directory."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return parse_config(doc, os.path.dirname(os.path.abspath(path)))


def validate_config(cfg: BenchmarkConfig) -> None:
    """Build replication 0's environment and agents without running anything."""
    spec = build_environment(cfg, 0, seeding.derive(cfg.seed, INSTANCE_STREAM))
    if cfg.task == EXTERNAL_VALIDITY:
        if cfg.budget >= spec.k:
            raise ConfigError(f"budget must leave at least one unsampled site (have {spec.k})", "budget")
        return
    for entry in cfg.agents:
        agent_cfg = agent_for_env(entry, spec)
        state = agent_reset(agent_cfg, spec.k)
        if state.fmap is not None and state.fmap.context_dim not in (None, spec.context_dim):
            raise ConfigError("agent features do not match environment contexts", f"agents.{entry.name}.features")
    if any(isinstance(c, Budget) for c in cfg.constraints) and spec.costs is None:
        raise ConfigError("a budget constraint needs environment costs", "environment.costs")
