"""Assignment policies.

An agent is an :class:`AgentConfig` plus an immutable :class:`AgentState`.
:func:`act_batch` turns a batch of contexts into per-unit arm distributions,
:func:`observe` folds a finished batch into the state (no intra-batch
updates), and :func:`exploit` makes the post-experiment selection.

Posterior-sampling agents realize "probability that arm a is optimal" by
sampling: each unit gets its own posterior draw and a point mass on that
draw's argmax. Ties always go to the lowest arm index (``np.argmax``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .errors import ConfigError, InvalidInputError
from .linear_model import (
    ARM_ONE_HOT,
    DesignState,
    FeatureMap,
    GaussianPosterior,
    default_prior,
    design_reset,
    design_update,
    featurize_all,
    featurize_terminal,
    ols_estimate,
    posterior_update,
    predictive_mean_var_many,
    _factor,
)

UNIFORM = "Uniform"
LINEAR_TS = "LinearTS"
LINEAR_TTTS = "LinearTTTS"
LINEAR_UCB = "LinearUCB"
LINEAR_EI = "LinearEI"
BUDGET_TS = "BudgetTS"
MAB_TS = "MabTS"
MAB_TTTS = "MabTTTS"

AGENT_KINDS = (UNIFORM, LINEAR_TS, LINEAR_TTTS, LINEAR_UCB, LINEAR_EI, BUDGET_TS, MAB_TS, MAB_TTTS)
POSTERIOR_KINDS = (LINEAR_TS, LINEAR_TTTS, BUDGET_TS, MAB_TS, MAB_TTTS)
DESIGN_KINDS = (LINEAR_UCB, LINEAR_EI)

TTTS_MAX_REDRAWS = 100
BUDGET_EPS = 1e-9


@dataclass(frozen=True)
class AgentConfig:
    """Policy hyperparameters.

    ``fmap`` may be left None and filled in from the environment. MAB kinds
    always use one-hot arm features. ``alpha_schedule`` overrides ``alpha``
    per epoch when given. ``per_batch`` shares a single posterior draw across
    all units of a batch instead of one draw per unit.
    """

    kind: str
    fmap: Optional[FeatureMap] = None
    beta: float = 0.5
    alpha: float = 1.0
    ts_draws: int = 1000
    costs: Optional[tuple] = None
    noise_var: float = 1.0
    prior_var: float = 1.0
    ridge: float = 1.0
    per_batch: bool = False
    alpha_schedule: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ConfigError(f"unknown agent kind {self.kind!r}", "agent.kind")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}", "agent.beta")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}", "agent.alpha")
        if self.costs is not None:
            object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
            if any(c <= 0 for c in self.costs):
                raise ConfigError("costs must be positive", "agent.costs")
        if self.noise_var <= 0 or self.prior_var <= 0 or self.ridge <= 0:
            raise ConfigError("noise_var, prior_var and ridge must be positive", "agent")
        if self.ts_draws < 1:
            raise ConfigError("ts_draws must be >= 1", "agent.ts_draws")

    def alpha_at(self, epoch: int) -> float:
        if self.alpha_schedule:
            return float(self.alpha_schedule[min(epoch, len(self.alpha_schedule) - 1)])
        return self.alpha


@dataclass(frozen=True, eq=False)
class AgentState:
    config: AgentConfig
    k: int
    fmap: Optional[FeatureMap]
    model: GaussianPosterior | DesignState | None
    counts: np.ndarray
    sums: np.ndarray

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def n_obs(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True, eq=False)
class Selection:
    """Post-experiment arms; ``fallback`` is set when no data backed the choice."""

    arms: np.ndarray
    fallback: bool = False


def agent_reset(config: AgentConfig, k: int, d: int | None = None) -> AgentState:
    fmap = config.fmap
    if config.kind in (MAB_TS, MAB_TTTS):
        fmap = FeatureMap(ARM_ONE_HOT, k)
    if config.kind == UNIFORM:
        model = None
    else:
        if fmap is None:
            raise ConfigError(f"{config.kind} needs a feature map", "agent.features")
        if fmap.k != k:
            raise ConfigError(f"feature map has {fmap.k} arms, environment has {k}", "agent.features")
        if d is not None and config.kind not in (MAB_TS, MAB_TTTS) and d != fmap.d:
            raise ConfigError(f"feature dimension {fmap.d} != declared {d}", "agent.features")
        if config.kind in DESIGN_KINDS:
            model = design_reset(fmap.d, config.ridge)
        else:
            model = default_prior(fmap.d, config.prior_var)
    if config.kind == BUDGET_TS and config.costs is None:
        raise ConfigError("BudgetTS needs per-arm costs", "agent.costs")
    if config.costs is not None and len(config.costs) != k:
        raise ConfigError(f"{len(config.costs)} costs for {k} arms", "agent.costs")
    return AgentState(config, k, fmap, model, np.zeros(k, dtype=np.int64), np.zeros(k))


def _phis(state: AgentState, contexts, epoch: int) -> np.ndarray:
    x = np.asarray(contexts, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    return featurize_all(state.fmap, x, epoch)


def _one_hot(idx: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((idx.size, k))
    if idx.size == 1:
        out[0, idx[0]] = 1.0
    else:
        out[np.arange(idx.size), idx] = 1.0
    return out


def _draw_scores(state: AgentState, phis: np.ndarray, rng: np.random.Generator, L=None) -> np.ndarray:
    """Per-unit sampled rewards ``phi(x_i, a) @ theta_i``, shape ``(n, K)``."""
    post = state.model
    n = phis.shape[0]
    if L is None:
        L = _factor(post.sigma)
    draws = 1 if state.config.per_batch else n
    if draws == 1:
        return phis.dot(post.theta + L.dot(rng.standard_normal(post.d)))
    z = rng.standard_normal((draws, post.d))
    thetas = post.theta + z @ L.T
    return np.einsum("nkd,nd->nk", phis, thetas)


def act_batch(state: AgentState, contexts, epoch: int, rng: np.random.Generator, phis=None) -> np.ndarray:
    """Assignment distributions for every unit, shape ``(n, K)``.

    ``phis`` may carry precomputed ``featurize_all`` output for the batch.
    """
    kind = state.kind
    k = state.k
    if kind == UNIFORM:
        n = np.asarray(contexts).shape[0] if np.ndim(contexts) > 1 else 1
        return np.full((n, k), 1.0 / k)
    if phis is None:
        phis = _phis(state, contexts, epoch)
    n = phis.shape[0]
    if kind in (LINEAR_TS, MAB_TS):
        return _one_hot(np.argmax(_draw_scores(state, phis, rng), axis=1), k)
    if kind in (LINEAR_TTTS, MAB_TTTS):
        return _one_hot(_ttts_arms(state, phis, rng), k)
    if kind == BUDGET_TS:
        scores = _draw_scores(state, phis, rng)
        w = np.maximum(scores, BUDGET_EPS) / np.asarray(state.config.costs)
        return w / w.sum(axis=1, keepdims=True)
    if kind == LINEAR_UCB:
        return _one_hot(np.argmax(ucb_index(state, phis, epoch), axis=1), k)
    return _one_hot(np.argmax(ei_index(state, phis), axis=1), k)


def act(state: AgentState, context, epoch: int, rng: np.random.Generator) -> np.ndarray:
    """Distribution over arms for a single unit."""
    x = np.asarray(context, dtype=float).reshape(1, -1)
    return act_batch(state, x, epoch, rng)[0]


def _ttts_arms(state: AgentState, phis: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = _factor(state.model.sigma)
    first = _draw_scores(state, phis, rng, L)
    leader = np.argmax(first, axis=1)
    arms = leader.copy()
    pending = np.flatnonzero(rng.random(leader.size) >= state.config.beta)
    for _ in range(TTTS_MAX_REDRAWS):
        if pending.size == 0:
            return arms
        redraw = np.argmax(_draw_scores(state, phis[pending], rng, L), axis=1)
        found = redraw != leader[pending]
        arms[pending[found]] = redraw[found]
        pending = pending[~found]
    if pending.size:
        # fall back to the runner-up under the first draw
        masked = first[pending].copy()
        masked[np.arange(pending.size), leader[pending]] = -np.inf
        arms[pending] = np.argmax(masked, axis=1)
    return arms


def ucb_index(state: AgentState, phis: np.ndarray, epoch: int = 0) -> np.ndarray:
    """``phi @ theta_hat + alpha * sqrt(phi^T V^-1 phi)`` per unit and arm."""
    mean, lev = predictive_mean_var_many(state.model, phis)
    return mean + state.config.alpha_at(epoch) * np.sqrt(lev)


def ei_index(state: AgentState, phis: np.ndarray) -> np.ndarray:
    """Expected improvement over the best predicted mean, per unit and arm.

    The predictive standard deviation is ``sqrt(s2 * phi^T V^-1 phi)``, i.e. the
    posterior under the prior implied by the ridge weight.
    """
    mean, lev = predictive_mean_var_many(state.model, phis)
    sd = np.sqrt(state.config.noise_var * lev)
    best = mean.max(axis=-1, keepdims=True)
    gap = mean - best
    out = np.maximum(gap, 0.0)
    pos = sd > 0
    z = np.zeros_like(gap)
    z[pos] = gap[pos] / sd[pos]
    ei = sd * (z * stats.norm.cdf(z) + stats.norm.pdf(z))
    out[pos] = ei[pos]
    return np.maximum(out, 0.0)


def optimal_probabilities(state: AgentState, context, epoch: int, rng: np.random.Generator, draws=None):
    """Monte-Carlo estimate of P(arm a is optimal) under the posterior.

    For reporting only; acting never needs the full vector.
    """
    if state.kind == UNIFORM or state.kind in DESIGN_KINDS:
        return act(state, context, epoch, rng)
    draws = state.config.ts_draws if draws is None else draws
    phis = _phis(state, context, epoch)[0]
    L = _factor(state.model.sigma)
    thetas = state.model.theta + rng.standard_normal((draws, state.model.d)) @ L.T
    best = np.argmax(thetas @ phis.T, axis=1)
    return np.bincount(best, minlength=state.k) / draws


def observe(state: AgentState, contexts, assignments, outcomes, epoch: int, phis=None) -> AgentState:
    """Fold one batch of outcomes into the state."""
    a = np.asarray(assignments, dtype=np.int64).reshape(-1)
    r = np.asarray(outcomes, dtype=float).reshape(-1)
    if a.size != r.size:
        raise InvalidInputError(f"{a.size} assignments but {r.size} outcomes")
    if a.size == 0:
        return state
    if a.size == 1:
        arm = int(a[0])
        if not 0 <= arm < state.k:
            raise InvalidInputError(f"assignment out of range for K={state.k}")
        counts = state.counts.copy()
        sums = state.sums.copy()
        counts[arm] += 1
        sums[arm] += r[0]
    else:
        if a.min() < 0 or a.max() >= state.k:
            raise InvalidInputError(f"assignment out of range for K={state.k}")
        counts = state.counts + np.bincount(a, minlength=state.k)
        sums = state.sums + np.bincount(a, weights=r, minlength=state.k)
    model = state.model
    if model is not None:
        if phis is None:
            phis = _phis(state, contexts, epoch)
        if phis.shape[0] != a.size:
            raise InvalidInputError(f"{phis.shape[0]} contexts but {a.size} assignments")
        rows = phis[:, a[0]] if a.size == 1 else phis[np.arange(a.size), a]
        if isinstance(model, DesignState):
            model = design_update(model, rows, r)
        else:
            model = posterior_update(model, state.config.noise_var, rows, r)
    return AgentState(state.config, state.k, state.fmap, model, counts, sums)


def predicted_means(state: AgentState, contexts, epoch_mode: str = "terminal", epoch: int | None = None) -> np.ndarray:
    """Point predictions ``(n, K)`` used for the final selection."""
    x = np.asarray(contexts, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    n = x.shape[0]
    if state.kind == UNIFORM:
        with np.errstate(invalid="ignore", divide="ignore"):
            emp = np.where(state.counts > 0, state.sums / np.maximum(state.counts, 1), -np.inf)
        return np.broadcast_to(emp, (n, state.k)).copy()
    if epoch_mode == "terminal":
        phis = featurize_terminal(state.fmap, x)
    elif epoch_mode == "per_epoch":
        t = state.fmap.t_total - 1 if epoch is None else epoch
        phis = featurize_all(state.fmap, x, max(t, 0))
    else:
        raise InvalidInputError(f"unknown epoch mode {epoch_mode!r}")
    coef = state.model.theta if isinstance(state.model, GaussianPosterior) else ols_estimate(state.model)
    return phis @ coef


def exploit(
    state: AgentState,
    contexts,
    epoch_mode: str = "terminal",
    epoch: int | None = None,
    single_arm: bool = False,
) -> Selection:
    """Post-experiment assignment for each context.

    With ``single_arm`` every context gets the arm with the best average
    prediction over the population (best-arm identification).
    """
    means = predicted_means(state, contexts, epoch_mode, epoch)
    fallback = state.kind == UNIFORM and state.n_obs == 0
    if fallback:
        return Selection(np.zeros(means.shape[0], dtype=np.int64), True)
    if single_arm:
        arm = int(np.argmax(means.mean(axis=0)))
        return Selection(np.full(means.shape[0], arm, dtype=np.int64))
    return Selection(np.argmax(means, axis=1).astype(np.int64))


def select_top_k(state: AgentState, contexts, k: int, epoch_mode: str = "terminal") -> np.ndarray:
    """The ``k`` arms with the best average prediction, best first."""
    if not 1 <= k <= state.k:
        raise InvalidInputError(f"top-k needs 1 <= k <= {state.k}, got {k}")
    avg = predicted_means(state, contexts, epoch_mode).mean(axis=0)
    return np.argsort(-avg, kind="stable")[:k]
