"""Per-set Gaussian-mixture estimation with diagonal covariances.

Each set is summarized by mixture weights, means, and diagonal variances for
C components, estimated by expectation-maximization started from the shared
prototype bank (uniform weights, means at the prototypes, unit variances).

Numerical conventions:

* all arithmetic is float64 regardless of input dtype;
* responsibilities and the data log-likelihood are computed in log space
  with per-row max subtraction;
* row normalizations sum the per-component terms in sorted value order, so
  relabeling the prototypes permutes the outputs bit-exactly;
* variances are clamped below at ``var_floor`` to keep densities finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .prototypes import PrototypeBank

VAR_FLOOR_DEFAULT = 1e-4
_DEGENERATE_MASS = 1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class EmConfig:
    num_steps: int = 1
    var_floor: float = VAR_FLOOR_DEFAULT
    log_space: bool = True

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValidationError("num_steps must be >= 1")
        if not (self.var_floor > 0):
            raise ValidationError("var_floor must be > 0")


@dataclass(eq=False)
class MixtureParams:
    """Estimated mixture: weights pi (C,), means mu (C, d), variances sigma (C, d)."""

    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    degenerate: tuple[int, ...] = field(default=())

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if pi.ndim != 1 or mu.ndim != 2 or sigma.shape != mu.shape or pi.shape[0] != mu.shape[0]:
            raise ValidationError("inconsistent mixture parameter shapes")
        if np.any(pi < 0) or abs(float(pi.sum()) - 1.0) > 1e-9:
            raise ValidationError("pi must be non-negative and sum to 1")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValidationError("mu and sigma must be finite")
        if np.any(sigma <= 0):
            raise ValidationError("sigma entries must be strictly positive")
        for arr in (pi, mu, sigma):
            arr.setflags(write=False)
        self.pi, self.mu, self.sigma = pi, mu, sigma

    @property
    def C(self) -> int:
        return self.pi.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]


@dataclass(eq=False)
class PosteriorMatrix:
    """Component responsibilities, one row per set element."""

    q: np.ndarray  # N x C

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 2:
            raise ValidationError("q must be an N x C matrix")
        if np.any(q < 0) or np.any(q > 1):
            raise ValidationError("q entries must lie in [0, 1]")
        if np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("q rows must sum to 1")
        q.setflags(write=False)
        self.q = q

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def C(self) -> int:
        return self.q.shape[1]


def _as_features(features: np.ndarray) -> np.ndarray:
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValidationError("features must be a non-empty N x d matrix")
    return z


def _sorted_row_sum(values: np.ndarray) -> np.ndarray:
    """Row sums over value-sorted entries: invariant to column permutation."""
    return np.sort(values, axis=1).sum(axis=1)


def _log_joint(z: np.ndarray, params: MixtureParams) -> np.ndarray:
    """log pi_c + log N(z_n; mu_c, diag sigma_c), one column per component."""
    n, d = z.shape
    out = np.empty((n, params.C), dtype=np.float64)
    log_pi = np.log(params.pi + np.where(params.pi == 0.0, 1e-300, 0.0))
    for c in range(params.C):
        diff = z - params.mu[c]
        maha = np.sum(diff * diff / params.sigma[c], axis=1)
        log_det = float(np.sum(np.log(params.sigma[c])))
        out[:, c] = log_pi[c] - 0.5 * (d * _LOG_2PI + log_det + maha)
    return out


def init_params(bank: PrototypeBank) -> MixtureParams:
    """Uniform weights, means at the prototypes, unit variances."""
    c = bank.C
    return MixtureParams(
        pi=np.full(c, 1.0 / c),
        mu=bank.prototypes.copy(),
        sigma=np.ones((c, bank.d)),
    )


def e_step(features: np.ndarray, params: MixtureParams, *, log_space: bool = True) -> PosteriorMatrix:
    """Posterior responsibility of each component for each element."""
    z = _as_features(features)
    if z.shape[1] != params.d:
        raise ValidationError(f"features have d={z.shape[1]}, params have d={params.d}")
    if log_space:
        lj = _log_joint(z, params)
        row_max = lj.max(axis=1, keepdims=True)
        weights = np.exp(lj - row_max)
    else:
        lj = _log_joint(z, params)
        weights = np.exp(lj)
    denom = _sorted_row_sum(weights)
    bad = ~np.isfinite(denom) | (denom <= 0.0)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite or zero mixture density at element row {row}")
    q = weights / denom[:, None]
    return PosteriorMatrix(q=np.clip(q, 0.0, 1.0))


def m_step(
    features: np.ndarray,
    q: PosteriorMatrix,
    *,
    var_floor: float = VAR_FLOOR_DEFAULT,
    prev: MixtureParams | None = None,
) -> MixtureParams:
    """Maximum-likelihood update of (pi, mu, sigma) under responsibilities q.

    The variance is the responsibility-weighted squared deviation from the
    freshly updated mean (biased, no Bessel correction), clamped at
    ``var_floor``. A component whose total responsibility falls below 1e-12
    keeps its previous mean/variance (``prev`` must be supplied for that) and
    is reported in the ``degenerate`` field.
    """
    z = _as_features(features)
    qm = q.q
    if qm.shape[0] != z.shape[0]:
        raise ValidationError("q and features disagree on N")
    n, c = qm.shape
    mass = qm.sum(axis=0)
    pi = mass / n
    mu = np.empty((c, z.shape[1]), dtype=np.float64)
    sigma = np.empty_like(mu)
    degenerate = []
    for k in range(c):
        if mass[k] < _DEGENERATE_MASS:
            if prev is None:
                raise NumericalError(
                    f"component {k} has vanished responsibility and no previous parameters"
                )
            mu[k] = prev.mu[k]
            sigma[k] = prev.sigma[k]
            degenerate.append(k)
            continue
        w = qm[:, k]
        mu[k] = (w @ z) / mass[k]
        diff = z - mu[k]
        sigma[k] = np.maximum((w @ (diff * diff)) / mass[k], var_floor)
    return MixtureParams(pi=pi, mu=mu, sigma=sigma, degenerate=tuple(degenerate))


def log_likelihood(features: np.ndarray, params: MixtureParams) -> float:
    """Data log-likelihood under the mixture, with all constants kept."""
    z = _as_features(features)
    if z.shape[1] != params.d:
        raise ValidationError(f"features have d={z.shape[1]}, params have d={params.d}")
    lj = _log_joint(z, params)
    row_max = lj.max(axis=1)
    total = float(np.sum(row_max + np.log(_sorted_row_sum(np.exp(lj - row_max[:, None])))))
    if not np.isfinite(total):
        raise NumericalError("non-finite log-likelihood")
    return total


def fit_set(
    features: np.ndarray, bank: PrototypeBank, cfg: EmConfig = EmConfig()
) -> tuple[MixtureParams, PosteriorMatrix]:
    """Run EM from the prototype initialization on one set.

    Returns the final parameters together with the responsibilities from the
    last E-step (the posteriors the final M-step consumed).
    """
    z = _as_features(features)
    if z.shape[1] != bank.d:
        raise ValidationError(f"features have d={z.shape[1]}, bank has d={bank.d}")
    params = init_params(bank)
    posterior = None
    for _ in range(cfg.num_steps):
        posterior = e_step(z, params, log_space=cfg.log_space)
        params = m_step(z, posterior, var_floor=cfg.var_floor, prev=params)
    assert posterior is not None
    return params, posterior
