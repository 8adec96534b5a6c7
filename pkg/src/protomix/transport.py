"""Entropic optimal transport from set elements onto the prototype bank.

Couples the uniform empirical distribution over the N elements (mass 1/N
each) with the uniform distribution over the C prototypes (mass 1/C each)
under squared Euclidean cost, via log-domain Sinkhorn iterations. The
aggregation treats the resulting plan as soft assignments and reads off a
mass-weighted barycenter of elements per prototype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import SetEmbedding
from .errors import ValidationError
from .prototypes import PrototypeBank

_MARGINAL_TOL = 1e-6


@dataclass(frozen=True)
class SinkhornConfig:
    eps: float | None = None  # None: 0.1 x median pairwise cost
    max_iters: int = 200
    marginal_tol: float = _MARGINAL_TOL

    def __post_init__(self):
        if self.eps is not None and not (self.eps > 0):
            raise ValidationError("eps must be > 0")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not (self.marginal_tol > 0):
            raise ValidationError("marginal_tol must be > 0")


@dataclass(eq=False)
class TransportPlan:
    """N x C coupling with uniform marginals 1/N (rows) and 1/C (columns)."""

    plan: np.ndarray
    eps: float
    iters_run: int
    converged: bool = True
    residuals: tuple[float, float] = (0.0, 0.0)  # (row, column) marginal residuals

    def __post_init__(self):
        plan = np.asarray(self.plan, dtype=np.float64)
        if plan.ndim != 2:
            raise ValidationError("plan must be an N x C matrix")
        if np.any(plan < 0) or not np.all(np.isfinite(plan)):
            raise ValidationError("plan entries must be finite and non-negative")
        if self.converged:
            n, c = plan.shape
            if np.any(np.abs(plan.sum(axis=1) - 1.0 / n) > _MARGINAL_TOL):
                raise ValidationError("row sums must equal 1/N")
            if np.any(np.abs(plan.sum(axis=0) - 1.0 / c) > _MARGINAL_TOL):
                raise ValidationError("column sums must equal 1/C")
        plan.setflags(write=False)
        self.plan = plan

    @property
    def n(self) -> int:
        return self.plan.shape[0]

    @property
    def C(self) -> int:
        return self.plan.shape[1]


def _cost_matrix(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    diffs = features[:, None, :] - prototypes[None, :, :]
    return np.sum(diffs * diffs, axis=2)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(
    features: np.ndarray, bank: PrototypeBank, cfg: SinkhornConfig = SinkhornConfig()
) -> TransportPlan:
    """Solve the entropic uniform-marginal transport problem for one set.

    On failure to reach ``marginal_tol`` within ``max_iters`` the plan is
    still returned, with ``converged=False`` and the achieved residuals.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValidationError("features must be a non-empty N x d matrix")
    if z.shape[1] != bank.d:
        raise ValidationError(f"features have d={z.shape[1]}, bank has d={bank.d}")
    n, c = z.shape[0], bank.C
    cost = _cost_matrix(z, bank.prototypes)
    eps = cfg.eps
    if eps is None:
        med = float(np.median(cost))
        eps = 0.1 * med if med > 0 else 1.0

    log_a = np.full(n, -np.log(n))
    log_b = np.full(c, -np.log(c))
    f = np.zeros(n)
    g = np.zeros(c)
    scaled_cost = cost / eps

    iters = 0
    row_res = col_res = np.inf
    for iters in range(1, cfg.max_iters + 1):
        f = eps * (log_a - _logsumexp(g[None, :] / eps - scaled_cost, axis=1))
        g = eps * (log_b - _logsumexp(f[:, None] / eps - scaled_cost, axis=0))
        plan = np.exp((f[:, None] + g[None, :]) / eps - scaled_cost)
        row_res = float(np.abs(plan.sum(axis=1) - 1.0 / n).max())
        col_res = float(np.abs(plan.sum(axis=0) - 1.0 / c).max())
        if row_res < cfg.marginal_tol and col_res < cfg.marginal_tol:
            return TransportPlan(
                plan=plan, eps=eps, iters_run=iters, converged=True,
                residuals=(row_res, col_res),
            )
    return TransportPlan(
        plan=plan, eps=eps, iters_run=iters, converged=False,
        residuals=(row_res, col_res),
    )


def barycentric_blocks(features: np.ndarray, plan: TransportPlan) -> np.ndarray:
    """C x d matrix of per-prototype transported barycenters.

    Block c is the plan-weighted average of the elements, normalized by the
    mass the prototype received, so a prototype fed only copies of a vector
    v yields exactly v.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != plan.n:
        raise ValidationError("features do not match the plan's element count")
    mass = plan.plan.sum(axis=0)
    if np.any(mass <= 0):
        raise ValidationError("plan has a prototype with no mass")
    return (plan.plan.T @ z) / mass[:, None]


def ot_embedding(features: np.ndarray, plan: TransportPlan, set_id: str = "") -> SetEmbedding:
    """Concatenated per-prototype barycenters, length C*d."""
    blocks = barycentric_blocks(features, plan)
    return SetEmbedding(
        values=blocks.reshape(-1),
        variant="ot",
        C=plan.C,
        d=blocks.shape[1],
        set_id=set_id,
        meta={"eps": plan.eps, "iters_run": plan.iters_run, "converged": plan.converged},
    )
