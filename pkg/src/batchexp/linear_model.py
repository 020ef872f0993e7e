"""Linear reward models: feature maps, conjugate Gaussian posteriors, ridge design.

Every contextual agent models the conditional mean reward as a linear function
``phi(x, a) @ theta`` of a known feature map. Two summaries of the data are
kept here:

* :class:`GaussianPosterior` -- the Bayesian view, updated with the conjugate
  rule for known noise variance.
* :class:`DesignState` -- the frequentist view, the regularized Gram matrix
  ``V = lam*I + sum(phi phi^T)`` and ``b = sum(phi r)``.

All objects are immutable values; update functions return new objects.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Union


import numpy as np
from scipy import linalg as sla

from .errors import InvalidInputError, NumericError

ARM_ONE_HOT = "arm_one_hot"
PER_ARM = "per_arm"
ADDITIVE = "additive"
EPOCH_ARM = "epoch_arm"
SITE_BLOCK = "site_block"

FEATURE_KINDS = (ARM_ONE_HOT, PER_ARM, ADDITIVE, EPOCH_ARM, SITE_BLOCK)

SYM_TOL = 1e-10

_potrf = sla.lapack.dpotrf


@dataclass(frozen=True)
class FeatureMap:
    """Deterministic map ``(context, arm, epoch) -> R^d``.

    Layouts:

    * ``arm_one_hot``: ``e_a`` (d = K), contexts ignored.
    * ``per_arm``: context placed in block ``a`` of K blocks of size p (d = K*p),
      so ``phi @ theta == x @ theta_a``.
    * ``additive``: ``[x, e_a]`` (d = p + K), a shared covariate slope plus
      per-arm intercepts.
    * ``epoch_arm``: ``[e_t, e_a]`` (d = T + K), epoch indicator plus arm
      indicator; contexts ignored.
    * ``site_block``: the context is the flattened K x p table of site
      features and ``phi`` is row ``a`` of it (d = p); one coefficient shared
      by all sites.
    """

    kind: str
    k: int
    p: int = 0
    t_total: int = 0

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise InvalidInputError(f"unknown feature map kind {self.kind!r}")
        if self.k < 1:
            raise InvalidInputError(f"feature map needs k >= 1, got {self.k}")
        if self.kind in (PER_ARM, ADDITIVE, SITE_BLOCK) and self.p < 1:
            raise InvalidInputError(f"{self.kind} feature map needs p >= 1, got {self.p}")
        if self.kind == EPOCH_ARM and self.t_total < 1:
            raise InvalidInputError(f"epoch_arm feature map needs t_total >= 1, got {self.t_total}")

    @property
    def d(self) -> int:
        if self.kind == ARM_ONE_HOT:
            return self.k
        if self.kind == PER_ARM:
            return self.k * self.p
        if self.kind == ADDITIVE:
            return self.p + self.k
        if self.kind == EPOCH_ARM:
            return self.t_total + self.k
        return self.p

    @property
    def context_dim(self) -> int | None:
        """Required context length, or None when contexts are ignored."""
        if self.kind in (PER_ARM, ADDITIVE):
            return self.p
        if self.kind == SITE_BLOCK:
            return self.k * self.p
        return None


@functools.lru_cache(maxsize=32)
def _eye(k: int) -> np.ndarray:
    out = np.eye(k)
    out.flags.writeable = False
    return out


def _check_context(fmap: FeatureMap, contexts: np.ndarray) -> None:
    need = fmap.context_dim
    if need is not None and contexts.shape[-1] != need:
        raise InvalidInputError(
            f"{fmap.kind} expects context length {need}, got {contexts.shape[-1]}"
        )


def featurize(fmap: FeatureMap, context, arm: int, epoch: int = 0) -> np.ndarray:
    """Feature vector for one ``(context, arm)`` pair at ``epoch``."""
    if not 0 <= arm < fmap.k:
        raise InvalidInputError(f"arm {arm} out of range for K={fmap.k}")
    x = np.asarray(context, dtype=float).reshape(1, -1)
    return featurize_all(fmap, x, epoch)[0, arm]


def featurize_all(fmap: FeatureMap, contexts, epoch: int = 0) -> np.ndarray:
    """Features for every unit and every arm, shape ``(n, K, d)``."""
    x = np.asarray(contexts, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if x.size else x.reshape(0, 0)
    n = x.shape[0]
    k = fmap.k
    if fmap.kind == ARM_ONE_HOT:
        return np.broadcast_to(_eye(k), (n, k, k)).copy()
    if fmap.kind == EPOCH_ARM:
        if not 0 <= epoch < fmap.t_total:
            raise InvalidInputError(f"epoch {epoch} out of range for T={fmap.t_total}")
        out = np.zeros((n, k, fmap.d))
        out[:, :, epoch] = 1.0
        out[:, np.arange(k), fmap.t_total + np.arange(k)] = 1.0
        return out
    _check_context(fmap, x)
    p = fmap.p
    if fmap.kind == PER_ARM:
        out = np.zeros((n, k, k, p))
        idx = np.arange(k)
        out[:, idx, idx, :] = x[:, None, :]
        return out.reshape(n, k, k * p)
    if fmap.kind == ADDITIVE:
        out = np.zeros((n, k, p + k))
        out[:, :, :p] = x[:, None, :]
        out[:, np.arange(k), p + np.arange(k)] = 1.0
        return out
    return x.reshape(n, k, p).copy()


def chosen_means(fmap: FeatureMap, theta, contexts, arms, epoch: int = 0) -> np.ndarray:
    """``phi(x_i, a_i) @ theta`` for each unit without building the full tensor."""
    th = np.asarray(theta, dtype=float)
    a = np.asarray(arms, dtype=np.int64)
    if fmap.kind == ARM_ONE_HOT:
        return th[a]
    x = np.asarray(contexts, dtype=float)
    if fmap.kind == PER_ARM:
        _check_context(fmap, x)
        w = th.reshape(fmap.k, fmap.p)
        if a.size == 1:
            return np.array([x[0] @ w[a[0]]])
        return np.einsum("ij,ij->i", x, w[a])
    if fmap.kind == ADDITIVE:
        _check_context(fmap, x)
        return x @ th[: fmap.p] + th[fmap.p + a]
    phi = featurize_all(fmap, x, epoch)
    return phi[np.arange(a.size), a] @ th


def featurize_terminal(fmap: FeatureMap, contexts) -> np.ndarray:
    """Features with any temporal block replaced by its uniform epoch average.

    Used for the post-experiment selection when the target is the reward
    averaged over the whole experiment.
    """
    if fmap.kind != EPOCH_ARM:
        return featurize_all(fmap, contexts, 0)
    out = featurize_all(fmap, contexts, 0)
    out[:, :, : fmap.t_total] = 1.0 / fmap.t_total
    return out


@dataclass(frozen=True)
class NoiseModel:
    s2: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.s2) and self.s2 > 0):
            raise InvalidInputError(f"noise variance must be > 0, got {self.s2}")


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    """``N(theta, sigma)`` belief over the coefficient vector."""

    theta: np.ndarray
    sigma: np.ndarray

    @property
    def d(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True, eq=False)
class DesignState:
    """Ridge-regularized Gram matrix ``v`` and response moment ``b``."""

    v: np.ndarray
    b: np.ndarray
    lam: float = 1.0

    @property
    def d(self) -> int:
        return self.b.shape[0]


def posterior_reset(prior_mean, prior_cov) -> GaussianPosterior:
    mean = np.array(prior_mean, dtype=float).reshape(-1)
    cov = np.array(prior_cov, dtype=float)
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise InvalidInputError(f"prior covariance must be {d}x{d}, got {cov.shape}")
    if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(mean)):
        raise InvalidInputError("prior contains non-finite values")
    if np.max(np.abs(cov - cov.T), initial=0.0) > SYM_TOL:
        raise InvalidInputError("prior covariance is not symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise InvalidInputError("prior covariance is not positive definite") from None
    return GaussianPosterior(mean, cov)


def default_prior(d: int, tau2: float = 1.0) -> GaussianPosterior:
    """``N(0, tau2 * I)``."""
    return posterior_reset(np.zeros(d), tau2 * np.eye(d))


def _stack(features, rewards, d):
    if (
        type(features) is np.ndarray
        and features.shape == (1, d)
        and type(rewards) is np.ndarray
        and rewards.size == 1
    ):
        r = rewards.reshape(1).astype(float, copy=False)
        if not math.isfinite(r[0]):
            raise InvalidInputError("non-finite reward")
        return features, r
    phi = np.asarray(features, dtype=float)
    r = np.asarray(rewards, dtype=float).reshape(-1)
    if phi.size == 0 and r.size == 0:
        return None, None
    phi = phi.reshape(-1, d) if phi.ndim == 1 and phi.size == d else phi
    if phi.ndim != 2 or phi.shape[1] != d:
        raise InvalidInputError(f"features must have dimension {d}, got shape {phi.shape}")
    if phi.shape[0] != r.shape[0]:
        raise InvalidInputError(
            f"{phi.shape[0]} feature rows but {r.shape[0]} rewards"
        )
    if not np.isfinite(r).all():
        raise InvalidInputError("non-finite reward")
    return phi, r


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def posterior_update(
    post: GaussianPosterior,
    noise: NoiseModel | float,
    features,
    rewards,
) -> GaussianPosterior:
    """Conjugate update with known noise variance.

    ``sigma' = (sigma^-1 + Phi^T Phi / s2)^-1`` and
    ``theta' = sigma' (sigma^-1 theta + Phi^T r / s2)``. Small batches use the
    Woodbury form (an n x n solve); large batches go through the precision.
    """
    s2 = noise.s2 if isinstance(noise, NoiseModel) else float(noise)
    phi, r = _stack(features, rewards, post.d)
    if phi is None:
        return post
    n, d = phi.shape
    theta, sigma = post.theta, post.sigma
    if n < d:
        return _woodbury(theta, sigma, phi, r, s2)
    try:
        c = sla.cho_factor(sigma, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return _woodbury(theta, sigma, phi, r, s2)
    prec = sla.cho_solve(c, np.eye(d), check_finite=False)
    prec = _sym(prec) + (phi.T @ phi) / s2
    rhs = sla.cho_solve(c, theta, check_finite=False) + (phi.T @ r) / s2
    try:
        cp = sla.cho_factor(prec, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return _woodbury(theta, sigma, phi, r, s2)
    new_sigma = _sym(sla.cho_solve(cp, np.eye(d), check_finite=False))
    new_theta = sla.cho_solve(cp, rhs, check_finite=False)
    return GaussianPosterior(new_theta, new_sigma)


def _woodbury(theta, sigma, phi, r, s2):
    n = phi.shape[0]
    if n == 1:
        # rank one; u_i * u_j is exactly symmetric, so no re-symmetrizing
        f = phi[0]
        v = sigma.dot(f)
        denom = s2 + float(v.dot(f))
        u = v * (1.0 / math.sqrt(denom))
        new_theta = theta + v * ((float(r[0]) - float(f.dot(theta))) / denom)
        return GaussianPosterior(new_theta, sigma - u[:, None] * u)
    else:
        sp = phi @ sigma  # n x d
        s = sp @ phi.T + s2 * np.eye(n)
        gain = sla.solve(s, sp, assume_a="pos", check_finite=False).T  # d x n
        new_theta = theta + gain @ (r - phi @ theta)
        new_sigma = sigma - gain @ sp
    return GaussianPosterior(new_theta, _sym(new_sigma))


def _factor(sigma: np.ndarray) -> np.ndarray:
    """Matrix L with L L^T == sigma (PSD-clamped when Cholesky fails)."""
    c, info = _potrf(sigma, lower=1, clean=1)
    # a non-finite input entry always reaches the last pivot
    if info == 0 and math.isfinite(c[-1, -1]):
        return c
    if not np.isfinite(sigma).all():
        raise NumericError("covariance has non-finite entries")
    w, q = np.linalg.eigh(_sym(sigma))
    w = np.clip(w, 0.0, None)
    if not np.all(np.isfinite(w)):
        raise NumericError("covariance factorization failed")
    return q * np.sqrt(w)


def posterior_sample(post: GaussianPosterior, rng: np.random.Generator, size: int | None = None):
    """Draw ``theta ~ N(post.theta, post.sigma)``; ``size`` draws stack row-wise."""
    L = _factor(post.sigma)
    if size is None:
        return post.theta + L @ rng.standard_normal(post.d)
    z = rng.standard_normal((size, post.d))
    return post.theta + z @ L.T


def design_reset(d: int, lam: float = 1.0) -> DesignState:
    if not lam > 0:
        raise InvalidInputError(f"ridge weight must be > 0, got {lam}")
    return DesignState(lam * np.eye(d), np.zeros(d), float(lam))


def design_update(state: DesignState, features, rewards) -> DesignState:
    phi, r = _stack(features, rewards, state.d)
    if phi is None:
        return state
    return DesignState(state.v + phi.T @ phi, state.b + phi.T @ r, state.lam)


def ols_estimate(state: DesignState) -> np.ndarray:
    return sla.solve(state.v, state.b, assume_a="pos", check_finite=False)


Model = Union[GaussianPosterior, DesignState]


def predictive_mean_var(model: Model, phi) -> tuple[float, float]:
    """Mean and variance of ``phi @ theta`` under ``model``.

    For a design state the variance is the leverage ``phi^T V^-1 phi``
    (unscaled by the noise variance).
    """
    m, v = predictive_mean_var_many(model, np.asarray(phi, dtype=float).reshape(1, -1))
    return float(m[0]), float(v[0])


def predictive_mean_var_many(model: Model, phis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`predictive_mean_var` over the last axis of ``phis``."""
    phis = np.asarray(phis, dtype=float)
    if phis.shape[-1] != model.d:
        raise InvalidInputError(f"feature dimension {phis.shape[-1]} != model dimension {model.d}")
    flat = phis.reshape(-1, model.d)
    if isinstance(model, GaussianPosterior):
        mean = flat @ model.theta
        var = np.einsum("ij,jk,ik->i", flat, model.sigma, flat)
    else:
        mean = flat @ ols_estimate(model)
        sol = sla.solve(model.v, flat.T, assume_a="pos", check_finite=False)
        var = np.einsum("ij,ji->i", flat, sol)
    var = np.clip(var, 0.0, None)
    return mean.reshape(phis.shape[:-1]), var.reshape(phis.shape[:-1])
