"""Greedy D-optimal site selection for sign generalization.

Sites are added one at a time, each time taking the candidate that most
increases ``log det(lam*I + sum x x^T)``. By the matrix determinant lemma the
increase from adding ``x`` is ``log(1 + x^T G^-1 x)``, so each step needs one
Cholesky factorization of the current Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .environments import SiteData, bootstrap_ate
from .errors import ConfigError, ContractError
from .linear_model import design_reset, design_update, ols_estimate
from .objectives import sign_generalization_score

D_OPTIMAL = "d_optimal"
UNIFORM = "uniform"
DESIGN_METHODS = (D_OPTIMAL, UNIFORM)

DEFAULT_RIDGE = 1e-6


@dataclass(frozen=True, eq=False)
class DesignSelection:
    chosen: tuple
    gram: np.ndarray

    @classmethod
    def empty(cls, d: int, lam: float = DEFAULT_RIDGE) -> "DesignSelection":
        return cls((), lam * np.eye(d))

    def add(self, index: int, x) -> "DesignSelection":
        if index in self.chosen:
            raise ContractError(f"site {index} already selected")
        x = np.asarray(x, dtype=float)
        return DesignSelection(self.chosen + (int(index),), self.gram + np.outer(x, x))

    def logdet(self) -> float:
        sign, val = np.linalg.slogdet(self.gram)
        return float(val) if sign > 0 else -np.inf


def gain_scores(selection: DesignSelection, candidates) -> np.ndarray:
    """``log(1 + x^T G^-1 x)`` per candidate row; -inf for chosen ones."""
    x = np.asarray(candidates, dtype=float)
    c = sla.cho_factor(selection.gram, lower=True)
    sol = sla.cho_solve(c, x.T)
    lev = np.einsum("ij,ji->i", x, sol)
    scores = np.log1p(np.clip(lev, 0.0, None))
    if selection.chosen:
        scores[list(selection.chosen)] = -np.inf
    return scores


def d_optimal_next(selection: DesignSelection, candidates) -> int:
    x = np.asarray(candidates, dtype=float)
    if x.shape[0] == 0 or len(selection.chosen) >= x.shape[0]:
        raise ContractError("no unchosen candidate left")
    return int(np.argmax(gain_scores(selection, x)))


def greedy_d_optimal(candidates, budget: int, lam: float = DEFAULT_RIDGE) -> DesignSelection:
    x = np.asarray(candidates, dtype=float)
    sel = DesignSelection.empty(x.shape[1], lam)
    for _ in range(budget):
        a = d_optimal_next(sel, x)
        sel = sel.add(a, x[a])
    return sel


def run_design_selection(
    sites: SiteData,
    budget: int,
    method: str,
    rng: np.random.Generator,
    lam: float = DEFAULT_RIDGE,
) -> list:
    """Ordered site indices picked by ``method`` (``d_optimal`` or ``uniform``)."""
    if not 1 <= budget <= sites.k:
        raise ConfigError(f"budget must be in [1, {sites.k}], got {budget}", "budget")
    if method == D_OPTIMAL:
        return list(greedy_d_optimal(sites.features, budget, lam).chosen)
    if method == UNIFORM:
        return [int(a) for a in rng.permutation(sites.k)[:budget]]
    raise ConfigError(f"unknown design method {method!r}", "method")


@dataclass(frozen=True, eq=False)
class DesignOutcome:
    order: list
    observed: np.ndarray
    model: np.ndarray
    score: float | None


def fit_sign_model(sites: SiteData, chosen, rng: np.random.Generator, lam: float = DEFAULT_RIDGE):
    """Observe one bootstrapped ATE per chosen site and regress it on site features.

    Returns ``(observed ATEs, coefficients)``.
    """
    chosen = list(chosen)
    obs = np.array([bootstrap_ate(sites, a, rng) for a in chosen])
    state = design_update(design_reset(sites.p, lam), sites.features[chosen], obs)
    return obs, ols_estimate(state)


def evaluate_design(
    sites: SiteData,
    budget: int,
    method: str,
    rng: np.random.Generator,
    lam: float = DEFAULT_RIDGE,
) -> DesignOutcome:
    order = run_design_selection(sites, budget, method, rng, lam)
    obs, model = fit_sign_model(sites, order, rng, lam)
    score = sign_generalization_score(order, sites, model) if budget < sites.k else None
    return DesignOutcome(order, obs, model, score)
