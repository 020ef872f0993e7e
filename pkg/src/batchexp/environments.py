"""Batched experiment environments.

An :class:`Env` runs ``T`` epochs. Each epoch it hands out a batch of unit
contexts, takes one arm per unit, and returns noisy outcomes. After the last
epoch :meth:`Env.post_experiment` draws the deployment population and an
:class:`Oracle` over true mean rewards, which only scoring code should touch.

Four reward processes are provided:

* :class:`LinearGaussian` -- ``phi(x, a) @ theta + N(0, s2)``.
* :class:`MomentFamily` -- per-epoch arm moments, ``N(mean[t, a], var[t, a])``.
* :class:`BootstrapSite` -- arms are sites; an outcome is a bootstrap draw of
  the site's treated-minus-control mean.
* :class:`Personalization` -- per-arm linear coefficients over a resampled
  covariate pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import seeding
from .errors import ConfigError, EnvStateError, InvalidInputError
from .linear_model import (
    ARM_ONE_HOT,
    EPOCH_ARM,
    PER_ARM,
    SITE_BLOCK,
    FeatureMap,
    NoiseModel,
    chosen_means,
    design_reset,
    design_update,
    featurize_all,
    featurize_terminal,
    ols_estimate,
)


@dataclass(frozen=True)
class EpochSchedule:
    t_total: int
    batch_sizes: tuple
    post_n: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "batch_sizes", tuple(int(n) for n in self.batch_sizes))
        if self.t_total < 1:
            raise ConfigError(f"need at least one epoch, got {self.t_total}", "schedule.t_total")
        if len(self.batch_sizes) != self.t_total:
            raise ConfigError(
                f"{len(self.batch_sizes)} batch sizes for {self.t_total} epochs",
                "schedule.batch_sizes",
            )
        if any(n < 1 for n in self.batch_sizes):
            raise ConfigError("batch sizes must be >= 1", "schedule.batch_sizes")
        if self.post_n < 1:
            raise ConfigError(f"post_n must be >= 1, got {self.post_n}", "schedule.post_n")

    @classmethod
    def constant(cls, t_total: int, batch_size: int, post_n: int = 1000) -> "EpochSchedule":
        return cls(t_total, (batch_size,) * t_total, post_n)

    @property
    def total_units(self) -> int:
        return sum(self.batch_sizes)


@dataclass(frozen=True, eq=False)
class EpochBatch:
    epoch: int
    contexts: np.ndarray  # (n, p); p may be 0

    def __len__(self):
        return self.contexts.shape[0]


@dataclass(frozen=True, eq=False)
class EpochRecord:
    epoch: int
    contexts: np.ndarray
    assignments: np.ndarray
    outcomes: np.ndarray


@dataclass(frozen=True, eq=False)
class MomentTable:
    """Per-epoch arm means and variances, both ``T x K``."""

    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        var = np.asarray(self.vars, dtype=float)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "vars", var)
        if means.ndim != 2 or means.shape != var.shape:
            raise InvalidInputError(f"means {means.shape} and vars {var.shape} must both be T x K")
        if not np.all(var > 0):
            raise InvalidInputError("moment variances must be strictly positive")

    @property
    def t_total(self) -> int:
        return self.means.shape[0]

    @property
    def k(self) -> int:
        return self.means.shape[1]

    def averaged_means(self) -> np.ndarray:
        """Per-arm mean over epochs."""
        return self.means.mean(axis=0)


@dataclass(frozen=True, eq=False)
class SiteData:
    """Site features plus raw unit outcomes under treatment and control."""

    features: np.ndarray  # (K, p)
    treated: tuple
    control: tuple

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=float))
        object.__setattr__(self, "features", feats)
        treated = tuple(np.asarray(t, dtype=float).reshape(-1) for t in self.treated)
        control = tuple(np.asarray(c, dtype=float).reshape(-1) for c in self.control)
        object.__setattr__(self, "treated", treated)
        object.__setattr__(self, "control", control)
        k = feats.shape[0]
        if len(treated) != k or len(control) != k:
            raise InvalidInputError(
                f"{k} sites but {len(treated)} treated and {len(control)} control groups"
            )
        for a in range(k):
            if treated[a].size < 2 or control[a].size < 2:
                raise InvalidInputError(f"site {a} needs at least 2 treated and 2 control outcomes")

    @property
    def k(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def true_ate(self) -> np.ndarray:
        return np.array([t.mean() - c.mean() for t, c in zip(self.treated, self.control)])


@dataclass(frozen=True, eq=False)
class LinearGaussian:
    """``r(x, a) = phi(x, a) @ theta``; contexts ~ N(context_mean, I_p).

    With ``intercept`` the first context coordinate is fixed at 1.
    """

    fmap: FeatureMap
    theta: np.ndarray
    noise_var: float = 1.0
    context_dim: int = 0
    context_mean: float = 0.0
    intercept: bool = False

    name = "linear_gaussian"


@dataclass(frozen=True, eq=False)
class MomentFamily:
    table: MomentTable

    name = "moment_table"


@dataclass(frozen=True, eq=False)
class BootstrapSite:
    sites: SiteData
    costs: np.ndarray | None = None

    name = "bootstrap_site"


@dataclass(frozen=True, eq=False)
class Personalization:
    """Rewards ``N(coefs[a] @ x, noise_var)`` with x resampled from ``covariates``."""

    covariates: np.ndarray  # (n_pool, p)
    coefs: np.ndarray  # (K, p)
    noise_var: float = 1.0

    name = "personalization"


Family = Union[LinearGaussian, MomentFamily, BootstrapSite, Personalization]
FAMILY_NAMES = ("linear_gaussian", "moment_table", "bootstrap_site", "personalization")


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    schedule: EpochSchedule
    k: int
    family: Family
    seed: int = 0

    def validate(self) -> None:
        fam = self.family
        if self.k < 1:
            raise ConfigError(f"need at least one arm, got {self.k}", "environment.k")
        if isinstance(fam, LinearGaussian):
            if fam.fmap.k != self.k:
                raise ConfigError(f"feature map has {fam.fmap.k} arms, spec has {self.k}", "environment.k")
            theta = np.asarray(fam.theta, dtype=float)
            if theta.shape != (fam.fmap.d,):
                raise ConfigError(f"theta must have length {fam.fmap.d}, got {theta.shape}", "environment.theta")
            need = fam.fmap.context_dim
            if need is not None and need != fam.context_dim:
                raise ConfigError(f"context dimension {fam.context_dim} != feature map's {need}", "environment.p")
            if fam.noise_var < 0:
                raise ConfigError("noise_var must be >= 0", "environment.noise_var")
        elif isinstance(fam, MomentFamily):
            if fam.table.k != self.k:
                raise ConfigError(f"table has {fam.table.k} arms, spec has {self.k}", "environment.k")
            if fam.table.t_total != self.schedule.t_total:
                raise ConfigError(
                    f"table has {fam.table.t_total} epochs, schedule has {self.schedule.t_total}",
                    "environment.t_total",
                )
        elif isinstance(fam, BootstrapSite):
            if fam.sites.k != self.k:
                raise ConfigError(f"{fam.sites.k} sites, spec has {self.k} arms", "environment.k")
            if any(n != 1 for n in self.schedule.batch_sizes):
                raise ConfigError("site selection samples one site per epoch", "environment.batch_size")
            if fam.costs is not None:
                costs = np.asarray(fam.costs, dtype=float)
                if costs.shape != (self.k,) or not np.all(costs > 0):
                    raise ConfigError("costs must be K positive numbers", "environment.costs")
        elif isinstance(fam, Personalization):
            cov = np.asarray(fam.covariates)
            coefs = np.asarray(fam.coefs)
            if coefs.shape != (self.k, cov.shape[1]):
                raise ConfigError(
                    f"coefficients {coefs.shape} do not match K={self.k}, p={cov.shape[1]}",
                    "environment.coefs",
                )
            if cov.shape[0] < 1:
                raise ConfigError("empty covariate pool", "environment.covariates")
            if fam.noise_var < 0:
                raise ConfigError("noise_var must be >= 0", "environment.noise_var")
        else:
            raise ConfigError(f"unknown family {type(fam).__name__}", "environment.family")

    @property
    def context_dim(self) -> int:
        fam = self.family
        if isinstance(fam, LinearGaussian):
            return fam.context_dim
        if isinstance(fam, MomentFamily):
            return 0
        if isinstance(fam, BootstrapSite):
            return fam.sites.k * fam.sites.p
        return np.asarray(fam.covariates).shape[1]

    def feature_map(self, kind: str | None = None) -> FeatureMap:
        """Natural model structure for this family, or the requested ``kind``."""
        fam = self.family
        t = self.schedule.t_total
        p = self.context_dim
        if kind is None:
            if isinstance(fam, LinearGaussian):
                return fam.fmap
            if isinstance(fam, MomentFamily):
                kind = ARM_ONE_HOT
            elif isinstance(fam, BootstrapSite):
                kind = SITE_BLOCK
            else:
                kind = PER_ARM
        if kind == SITE_BLOCK:
            if not isinstance(fam, BootstrapSite):
                raise ConfigError("site_block features need a site environment", "agent.features")
            return FeatureMap(SITE_BLOCK, self.k, fam.sites.p, t)
        return FeatureMap(kind, self.k, p, t)

    @property
    def nominal_noise_var(self) -> float:
        fam = self.family
        if isinstance(fam, (LinearGaussian, Personalization)):
            return fam.noise_var if fam.noise_var > 0 else 1.0
        if isinstance(fam, MomentFamily):
            return float(np.mean(fam.table.vars))
        ates = []
        for t, c in zip(fam.sites.treated, fam.sites.control):
            ates.append(t.var(ddof=1) / t.size + c.var(ddof=1) / c.size)
        return float(np.mean(ates))

    @property
    def costs(self) -> np.ndarray | None:
        if isinstance(self.family, BootstrapSite) and self.family.costs is not None:
            return np.asarray(self.family.costs, dtype=float)
        return None


class Oracle:
    """True conditional means, for scoring only."""

    def __init__(self, spec: EnvironmentSpec):
        self._spec = spec

    @property
    def k(self) -> int:
        return self._spec.k

    def means(self, contexts, epoch: int | None = None) -> np.ndarray:
        """``(n, K)`` mean rewards; ``epoch=None`` is the post-experiment target."""
        fam = self._spec.family
        x = np.asarray(contexts, dtype=float)
        n = x.shape[0]
        if isinstance(fam, LinearGaussian):
            if epoch is None:
                phi = featurize_terminal(fam.fmap, x)
            else:
                phi = featurize_all(fam.fmap, x, epoch)
            return phi @ np.asarray(fam.theta, dtype=float)
        if isinstance(fam, MomentFamily):
            row = fam.table.averaged_means() if epoch is None else fam.table.means[epoch]
            return np.broadcast_to(row, (n, self.k)).copy()
        if isinstance(fam, BootstrapSite):
            return np.broadcast_to(fam.sites.true_ate, (n, self.k)).copy()
        return x @ np.asarray(fam.coefs, dtype=float).T

    def means_by_epoch(self, contexts, epochs) -> np.ndarray:
        """``(n, K)`` in-experiment means where unit ``i`` arrived in ``epochs[i]``."""
        fam = self._spec.family
        x = np.asarray(contexts, dtype=float)
        ep = np.asarray(epochs, dtype=np.int64)
        if isinstance(fam, MomentFamily):
            return fam.table.means[ep]
        if isinstance(fam, LinearGaussian) and fam.fmap.kind == EPOCH_ARM:
            out = np.empty((ep.size, self.k))
            for t in np.unique(ep):
                rows = ep == t
                out[rows] = self.means(x[rows], int(t))
            return out
        return self.means(x, 0)

    def __call__(self, context, arm: int, epoch: int | None = None) -> float:
        return float(self.means(np.asarray(context, dtype=float).reshape(1, -1), epoch)[0, arm])


class Env:
    """Single-owner, sequentially stepped environment instance."""

    def __init__(self, spec: EnvironmentSpec, seed: int | None = None):
        spec.validate()
        self.spec = spec
        self.seed = spec.seed if seed is None else seed
        self.history: list[EpochRecord] = []
        self._batch: EpochBatch | None = None
        self._terminal = False
        self._started = False

    # -- streams -----------------------------------------------------------
    def _init_streams(self):
        self._ctx_rng = seeding.stream(self.seed, seeding.CONTEXT_STREAM)
        self._noise_rng = seeding.stream(self.seed, seeding.NOISE_STREAM)
        self._boot_rng = seeding.stream(self.seed, seeding.BOOTSTRAP_STREAM)
        self._post_rng = seeding.stream(self.seed, seeding.POST_STREAM)

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def terminal(self) -> bool:
        return self._terminal

    @property
    def epoch(self) -> int:
        return len(self.history)

    def reset(self) -> EpochBatch:
        self._init_streams()
        self.history = []
        self._terminal = False
        self._started = True
        # Contexts and noise for every unit are drawn up front, so unit i sees
        # the same context and noise whatever the agent does.
        sizes = self.spec.schedule.batch_sizes
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        total = int(self._offsets[-1])
        self._all_contexts = self._contexts(total, self._ctx_rng)
        self._all_noise = self._noise_rng.standard_normal(total)
        self._all_contexts.flags.writeable = False
        self._batch = self._draw_batch(0)
        return self._batch

    def _contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        fam = self.spec.family
        if isinstance(fam, LinearGaussian):
            p = fam.context_dim
            x = rng.standard_normal((n, p)) + fam.context_mean
            if fam.intercept and p:
                x[:, 0] = 1.0
            return x
        if isinstance(fam, MomentFamily):
            return np.zeros((n, 0))
        if isinstance(fam, BootstrapSite):
            return np.tile(fam.sites.features.reshape(1, -1), (n, 1))
        pool = np.asarray(fam.covariates, dtype=float)
        return pool[rng.integers(0, pool.shape[0], size=n)]

    def _draw_batch(self, epoch: int) -> EpochBatch:
        lo, hi = self._offsets[epoch], self._offsets[epoch + 1]
        return EpochBatch(epoch, self._all_contexts[lo:hi])

    def step(self, assignments, truncate: bool = False):
        """Apply one arm per unit of the current batch.

        Returns ``(outcomes, next_batch)``; ``next_batch`` is None once the
        experiment has ended. With ``truncate`` only a prefix of the batch is
        treated and the experiment ends after this step (used when a
        constraint leaves no feasible arm).
        """
        if not self._started:
            raise EnvStateError("environment must be reset before stepping")
        if self._terminal:
            raise EnvStateError("environment is terminal")
        batch = self._batch
        a = np.asarray(assignments, dtype=np.int64).reshape(-1)
        n = batch.contexts.shape[0]
        if (truncate and a.size > n) or (not truncate and a.size != n):
            raise InvalidInputError(f"expected {n} assignments, got {a.size}")
        if a.size == 1:
            if not 0 <= a[0] < self.k:
                raise InvalidInputError(f"assignment out of range for K={self.k}")
        elif a.size and (a.min() < 0 or a.max() >= self.k):
            raise InvalidInputError(f"assignment out of range for K={self.k}")
        contexts = batch.contexts[: a.size]
        outcomes = self._outcomes(batch.epoch, contexts, a)
        self.history.append(EpochRecord(batch.epoch, contexts, a, outcomes))
        nxt = batch.epoch + 1
        if truncate or nxt >= self.spec.schedule.t_total:
            self._terminal = True
            self._batch = None
        else:
            self._batch = self._draw_batch(nxt)
        return outcomes, self._batch

    def _outcomes(self, epoch: int, contexts: np.ndarray, arms: np.ndarray) -> np.ndarray:
        fam = self.spec.family
        n = arms.size
        lo = self._offsets[epoch]
        z = self._all_noise[lo : lo + n]
        if isinstance(fam, BootstrapSite):
            return np.array([self._bootstrap_ate(int(a)) for a in arms], dtype=float)
        if isinstance(fam, MomentFamily):
            mu = fam.table.means[epoch, arms]
            sd = np.sqrt(fam.table.vars[epoch, arms])
            return mu + sd * z
        if isinstance(fam, LinearGaussian):
            mu = chosen_means(fam.fmap, fam.theta, contexts, arms, epoch)
        else:
            mu = np.einsum("ij,ij->i", contexts, np.asarray(fam.coefs, dtype=float)[arms])
        s2 = fam.noise_var
        if s2 == 0:
            return mu
        return mu + math.sqrt(s2) * z

    def _bootstrap_ate(self, site: int) -> float:
        return bootstrap_ate(self.spec.family.sites, site, self._boot_rng)

    def _unit_draws(self):
        """Contexts and standard-normal noise for every unit, in arrival order."""
        if not self._started:
            raise EnvStateError("environment must be reset first")
        return self._all_contexts, self._all_noise

    def _close(self, records) -> None:
        """Install a history simulated elsewhere from this env's own draws and end the run."""
        self.history = list(records)
        self._terminal = True
        self._batch = None

    def post_experiment(self):
        """Deployment contexts (``post_n`` of them) and the mean-reward oracle."""
        if not self._terminal:
            raise EnvStateError("post-experiment evaluation requires a terminal environment")
        contexts = self._contexts(self.spec.schedule.post_n, self._post_rng)
        return contexts, Oracle(self.spec)


# -- constructions -------------------------------------------------------------


def bootstrap_ate(sites: SiteData, site: int, rng: np.random.Generator) -> float:
    """Treated-minus-control mean after resampling both groups with replacement."""
    t, c = sites.treated[site], sites.control[site]
    bt = t[rng.integers(0, t.size, size=t.size)]
    bc = c[rng.integers(0, c.size, size=c.size)]
    return float(bt.mean() - bc.mean())


def augment_arms(
    table: MomentTable,
    target_k: int,
    scale: float = 0.5,
    rng: np.random.Generator | None = None,
    treatment: int = 1,
) -> MomentTable:
    """Add arms resembling the treatment column until there are ``target_k``.

    Each new arm copies the treatment arm's per-epoch means plus independent
    ``N(0, (scale * s)^2)`` perturbations, where ``s`` is the standard
    deviation of the treatment means across epochs. Variances are copied.
    """
    k = table.k
    if target_k < k:
        raise InvalidInputError(f"target_k={target_k} is below the existing {k} arms")
    if target_k == k:
        return table
    if not 0 <= treatment < k:
        raise InvalidInputError(f"treatment column {treatment} out of range")
    rng = np.random.default_rng() if rng is None else rng
    col = table.means[:, treatment]
    spread = float(col.std(ddof=1)) if table.t_total > 1 else 0.0
    extra = target_k - k
    noise = rng.standard_normal((table.t_total, extra)) * (scale * spread)
    means = np.hstack([table.means, col[:, None] + noise])
    var = np.hstack([table.vars, np.repeat(table.vars[:, [treatment]], extra, axis=1)])
    return MomentTable(means, var)


def sign_flip_table(
    k: int = 5,
    t_total: int = 10,
    gap: float = 0.5,
    advantage: float = 0.1,
    variance: float = 1.0,
    base: float = -0.2,
    lead: int = 0,
) -> MomentTable:
    """Synthetic non-stationary table whose per-epoch best arm alternates.

    Arms 0 and 1 swap +-``gap`` every epoch (arm ``lead`` is ahead in
    epoch 0); arm 1 carries an extra ``advantage`` so it is best on average.
    Remaining arms are constant at ``base``.
    """
    if k < 2:
        raise InvalidInputError("sign_flip_table needs k >= 2")
    if lead not in (0, 1):
        raise InvalidInputError(f"lead must be 0 or 1, got {lead}")
    sign = np.where(np.arange(t_total) % 2 == lead, 1.0, -1.0)
    means = np.full((t_total, k), float(base))
    means[:, 0] = gap * sign
    means[:, 1] = -gap * sign + advantage
    return MomentTable(means, np.full((t_total, k), float(variance)))


def make_personalization_env(
    units: Sequence,
    k: int,
    noise: NoiseModel | float,
    schedule: EpochSchedule,
    seed: int = 0,
    ridge: float = 1e-6,
) -> EnvironmentSpec:
    """Fit per-arm linear coefficients on observed units and wrap them as an env.

    ``units`` is a sequence of ``(covariates, arm, outcome)``. Each arm's
    coefficients come from a ridge regression (``ridge``) on the units observed
    under that arm.
    """
    if k < 2:
        raise ConfigError(f"personalization needs k >= 2, got {k}", "environment.k")
    x = np.array([np.asarray(u[0], dtype=float) for u in units])
    arms = np.array([int(u[1]) for u in units])
    y = np.array([float(u[2]) for u in units])
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("units must carry equal-length covariate vectors", "environment.units")
    if arms.min() < 0 or arms.max() >= k:
        raise ConfigError(f"observed arm out of range for k={k}", "environment.units")
    coefs = fit_per_arm(x, arms, y, k, ridge=ridge, min_obs=x.shape[1])
    s2 = noise.s2 if isinstance(noise, NoiseModel) else float(noise)
    spec = EnvironmentSpec(schedule, k, Personalization(x, coefs, s2), seed)
    spec.validate()
    return spec


def fit_per_arm(x, arms, y, k: int, ridge: float = 1e-6, min_obs: int | None = None) -> np.ndarray:
    """Per-arm ridge regression coefficients, shape ``(k, p)``."""
    p = x.shape[1]
    min_obs = p if min_obs is None else min_obs
    coefs = np.zeros((k, p))
    for a in range(k):
        rows = arms == a
        if rows.sum() < min_obs:
            raise ConfigError(
                f"arm {a} has {int(rows.sum())} observations, needs at least {min_obs}",
                f"arms[{a}]",
            )
        state = design_update(design_reset(p, ridge), x[rows], y[rows])
        coefs[a] = ols_estimate(state)
    return coefs


def synthetic_sites(
    k: int,
    p: int,
    rng: np.random.Generator,
    units_per_arm: int = 50,
    noise_sd: float = 1.0,
    theta=None,
    intercept: bool = True,
) -> SiteData:
    """Sites whose ATE is linear in site features plus sampling noise.

    Control outcomes are ``N(0, noise_sd^2)`` and treated outcomes
    ``N(x_a @ theta, noise_sd^2)``.
    """
    feats = rng.standard_normal((k, p))
    if intercept:
        feats[:, 0] = 1.0
    theta = rng.standard_normal(p) if theta is None else np.asarray(theta, dtype=float)
    effect = feats @ theta
    treated = [effect[a] + noise_sd * rng.standard_normal(units_per_arm) for a in range(k)]
    control = [noise_sd * rng.standard_normal(units_per_arm) for _ in range(k)]
    return SiteData(feats, tuple(treated), tuple(control))


def sample_costs(k: int, rng: np.random.Generator, mean: float = 20.0, var: float = 10.0, floor: float = 1.0):
    """Normal site costs truncated below at ``floor`` (redrawn until above it)."""
    sd = np.sqrt(var)
    costs = mean + sd * rng.standard_normal(k)
    bad = costs < floor
    while bad.any():
        costs[bad] = mean + sd * rng.standard_normal(int(bad.sum()))
        bad = costs < floor
    return costs


def synthetic_units(
    n: int,
    p: int,
    k: int,
    rng: np.random.Generator,
    coef_scale: float = 1.0,
    noise_sd: float = 0.0,
    coefs=None,
):
    """Observational-style units: covariates with intercept, one random arm each.

    Returns ``(units, coefs)`` with units as ``(covariates, arm, outcome)``.
    """
    x = rng.standard_normal((n, p))
    x[:, 0] = 1.0
    if coefs is None:
        coefs = coef_scale * rng.standard_normal((k, p))
    arms = rng.integers(0, k, size=n)
    y = np.einsum("ij,ij->i", x, coefs[arms]) + noise_sd * rng.standard_normal(n)
    return [(x[i], int(arms[i]), float(y[i])) for i in range(n)], np.asarray(coefs)
