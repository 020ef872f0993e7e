"""Run scoring and constraint masks.

Objectives are pure functions of a :class:`RunRecord`. Regret objectives use
oracle means, never realized outcomes. Constraints act by masking an agent's
assignment distribution before the harness samples from it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .environments import EpochRecord, Oracle, SiteData
from .errors import ContractError, InvalidInputError

SIMPLE_REGRET = "simple_regret"
POLICY_REGRET = "policy_regret"
CUMULATIVE_REGRET = "cumulative_regret"
TOP_K_REGRET = "top_k_regret"
BEST_ARM_ID_RATE = "best_arm_id_rate"
SIGN_GENERALIZATION = "sign_generalization"

OBJECTIVE_NAMES = (
    SIMPLE_REGRET,
    POLICY_REGRET,
    CUMULATIVE_REGRET,
    TOP_K_REGRET,
    BEST_ARM_ID_RATE,
    SIGN_GENERALIZATION,
)

SINGLE_SAMPLE = "single_sample"
BUDGET = "budget"
CONSTRAINT_NAMES = (SINGLE_SAMPLE, BUDGET)

ZERO_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class RunRecord:
    history: Sequence[EpochRecord]
    post_contexts: np.ndarray
    final_assignments: np.ndarray
    oracle: Oracle
    violations: tuple = ()
    selected_set: Optional[np.ndarray] = None
    stopped_early: bool = False

    def __post_init__(self):
        if len(self.final_assignments) != np.asarray(self.post_contexts).shape[0]:
            raise ContractError("one final assignment per post-experiment context is required")

    def post_means(self) -> np.ndarray:
        return self.oracle.means(self.post_contexts)


def simple_regret(record: RunRecord) -> float:
    """Gap between the best arm and the deployed arm, averaged over the population."""
    final = np.asarray(record.final_assignments)
    if final.size and np.any(final != final[0]):
        raise ContractError("simple regret needs one arm deployed to every context")
    avg = record.post_means().mean(axis=0)
    return float(avg.max() - avg[final[0]])


def policy_regret(record: RunRecord) -> float:
    means = record.post_means()
    final = np.asarray(record.final_assignments)
    chosen = means[np.arange(final.size), final]
    return float(means.max(axis=1).mean() - chosen.mean())


def cumulative_regret(record: RunRecord) -> float:
    """Within-experiment shortfall against each epoch's best arm per unit."""
    recs = [r for r in record.history if r.assignments.size]
    if not recs:
        return 0.0
    contexts = np.concatenate([r.contexts for r in recs])
    arms = np.concatenate([r.assignments for r in recs])
    epochs = np.concatenate([np.full(r.assignments.size, r.epoch) for r in recs])
    means = record.oracle.means_by_epoch(contexts, epochs)
    chosen = means[np.arange(arms.size), arms]
    return float(np.sum(means.max(axis=1) - chosen))


def top_k_regret(record: RunRecord, k: int) -> float:
    selected = record.selected_set
    if selected is None or len(set(int(a) for a in selected)) != k or len(selected) != k:
        raise ContractError(f"top-k regret needs a selected set of exactly {k} distinct arms")
    avg = record.post_means().mean(axis=0)
    if not 1 <= k <= avg.size:
        raise ContractError(f"k must be in [1, {avg.size}], got {k}")
    # both sums run in descending order; the best set dominates elementwise,
    # so rounding cannot make the difference negative
    best = np.sort(avg)[::-1][:k]
    chosen = np.sort(avg[np.asarray(selected)])[::-1]
    return float(sum(best.tolist()) - sum(chosen.tolist()))


def best_arm_id_rate(records: Sequence[RunRecord]) -> float:
    """Fraction of (run, context) pairs whose deployed arm attains the true maximum."""
    if not records:
        raise InvalidInputError("best_arm_id_rate needs at least one record")
    hits = 0
    total = 0
    for rec in records:
        means = rec.post_means()
        final = np.asarray(rec.final_assignments)
        chosen = means[np.arange(final.size), final]
        hits += int(np.sum(chosen >= means.max(axis=1)))
        total += final.size
    return hits / total


def sign_generalization_score(sampled_sites, sites: SiteData, model, features=None) -> float:
    """Share of unsampled sites whose predicted ATE sign matches the true sign.

    Predictions are ``features[a] @ model`` (site features by default). A
    true ATE of exactly zero counts as matched only by a prediction within
    1e-12 of zero.
    """
    feats = sites.features if features is None else np.asarray(features, dtype=float)
    sampled = {int(a) for a in sampled_sites}
    rest = [a for a in range(sites.k) if a not in sampled]
    if not rest:
        raise ContractError("sign generalization needs at least one unsampled site")
    pred = feats[rest] @ np.asarray(model, dtype=float)
    truth = sites.true_ate[rest]
    ok = 0
    for p_hat, t in zip(pred, truth):
        if t == 0:
            ok += abs(p_hat) <= ZERO_TOL
        else:
            ok += np.sign(p_hat) == np.sign(t) and p_hat != 0
    return ok / len(rest)


# -- constraints -----------------------------------------------------------------


@dataclass(frozen=True)
class SingleSample:
    name = SINGLE_SAMPLE


@dataclass(frozen=True)
class Budget:
    total: float

    name = BUDGET

    def __post_init__(self):
        if not self.total > 0:
            raise InvalidInputError(f"budget must be > 0, got {self.total}")


@dataclass
class Usage:
    """Per-arm sample counts and spend so far. Mutated by the harness as it assigns."""

    counts: np.ndarray
    costs: Optional[np.ndarray] = None
    spend: float = 0.0

    @classmethod
    def empty(cls, k: int, costs=None) -> "Usage":
        return cls(np.zeros(k, dtype=np.int64), None if costs is None else np.asarray(costs, dtype=float))

    def record(self, arm: int) -> None:
        self.counts[arm] += 1
        if self.costs is not None:
            self.spend += float(self.costs[arm])


def feasible_arms(kind, usage: Usage) -> np.ndarray:
    """Boolean mask of arms ``kind`` still allows."""
    if isinstance(kind, SingleSample):
        return usage.counts < 1
    if isinstance(kind, Budget):
        if usage.costs is None:
            raise InvalidInputError("a budget constraint needs per-arm costs")
        return usage.costs <= kind.total - usage.spend
    raise InvalidInputError(f"unknown constraint {kind!r}")


def apply_constraints(kinds, dist, usage: Usage):
    """Mask arms any constraint forbids and renormalize.

    Returns None when no arm is feasible. If the agent put all its mass on
    forbidden arms, the result is uniform over the feasible ones.
    """
    p = np.asarray(dist, dtype=float).copy()
    mask = np.ones(p.size, dtype=bool)
    for kind in kinds:
        mask &= feasible_arms(kind, usage)
    if not mask.any():
        return None
    p[~mask] = 0.0
    mass = p.sum()
    if mass <= 0:
        return mask / mask.sum()
    return p / mass


def apply_constraint(kind, dist, usage: Usage):
    return apply_constraints((kind,), dist, usage)


def constraint_violations(constraints, usage: Usage) -> tuple:
    out = []
    for c in constraints:
        if isinstance(c, SingleSample) and np.any(usage.counts > 1):
            out.append(f"{SINGLE_SAMPLE}: arms {np.flatnonzero(usage.counts > 1).tolist()} sampled more than once")
        if isinstance(c, Budget) and usage.spend > c.total + 1e-9:
            out.append(f"{BUDGET}: spent {usage.spend} of {c.total}")
    return tuple(out)

