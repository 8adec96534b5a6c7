"""Build fixed-length set embeddings from estimated mixture parameters and
drive any aggregation method over a whole cohort."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .baselines import deepsets_embed, h2t_embed, protocounts_embed
from .data import Cohort
from .embedding import SetEmbedding
from .errors import NumericalError, ValidationError
from .mixture import EmConfig, MixtureParams, fit_set
from .prototypes import PrototypeBank
from .transport import SinkhornConfig, ot_embedding, sinkhorn

EMBED_METHODS = (
    "panther_all",
    "panther_wa",
    "panther_top",
    "panther_bottom",
    "deepsets",
    "protocounts",
    "h2t",
    "ot",
)


def _component_block(params: MixtureParams, c: int) -> np.ndarray:
    return np.concatenate(([params.pi[c]], params.mu[c], params.sigma[c]))


def compose_all(params: MixtureParams, set_id: str = "") -> SetEmbedding:
    """[pi_c, mu_c, sigma_c] for every component, concatenated: C*(1+2d)."""
    values = np.concatenate([_component_block(params, c) for c in range(params.C)])
    return SetEmbedding(values=values, variant="all", C=params.C, d=params.d, set_id=set_id)


def compose_wa(params: MixtureParams, set_id: str = "") -> SetEmbedding:
    """pi-weighted average of means and of variances, concatenated: 2d."""
    wmu = params.pi @ params.mu
    wsigma = params.pi @ params.sigma
    return SetEmbedding(
        values=np.concatenate([wmu, wsigma]),
        variant="wa",
        C=params.C,
        d=params.d,
        set_id=set_id,
    )


def compose_top(params: MixtureParams, set_id: str = "") -> SetEmbedding:
    """Block of the component with the largest pi (ties: lowest index)."""
    c = int(np.argmax(params.pi))
    return SetEmbedding(
        values=_component_block(params, c),
        variant="top",
        C=params.C,
        d=params.d,
        set_id=set_id,
        meta={"component": c},
    )


def compose_bottom(params: MixtureParams, set_id: str = "") -> SetEmbedding:
    """Block of the component with the smallest pi (ties: lowest index)."""
    c = int(np.argmin(params.pi))
    return SetEmbedding(
        values=_component_block(params, c),
        variant="bottom",
        C=params.C,
        d=params.d,
        set_id=set_id,
        meta={"component": c},
    )


def read_params_block(emb: SetEmbedding, c: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Slice (pi_c, mu_c, sigma_c) back out of an 'all' embedding."""
    if emb.variant != "all":
        raise ValidationError(f"expected an 'all' embedding, got {emb.variant!r}")
    block = emb.block(c)
    d = emb.d
    return float(block[0]), block[1 : 1 + d], block[1 + d :]


def _embed_one(
    s,
    bank: PrototypeBank,
    method: str,
    em_cfg: EmConfig,
    sinkhorn_cfg: SinkhornConfig,
    normalize_counts: bool,
) -> SetEmbedding:
    if method == "deepsets":
        return deepsets_embed(s.features, set_id=s.id)
    if method == "protocounts":
        return protocounts_embed(s.features, bank, normalize=normalize_counts, set_id=s.id)
    if method == "h2t":
        return h2t_embed(s.features, bank, set_id=s.id)
    if method == "ot":
        plan = sinkhorn(s.features, bank, sinkhorn_cfg)
        return ot_embedding(s.features, plan, set_id=s.id)
    params, _ = fit_set(s.features, bank, em_cfg)
    if method == "panther_all":
        return compose_all(params, set_id=s.id)
    if method == "panther_wa":
        return compose_wa(params, set_id=s.id)
    if method == "panther_top":
        return compose_top(params, set_id=s.id)
    if method == "panther_bottom":
        return compose_bottom(params, set_id=s.id)
    raise ValidationError(f"unknown method {method!r}; valid: {', '.join(EMBED_METHODS)}")


def embed_cohort(
    cohort: Cohort,
    bank: PrototypeBank | None,
    method: str,
    *,
    em_cfg: EmConfig = EmConfig(),
    sinkhorn_cfg: SinkhornConfig = SinkhornConfig(),
    normalize_counts: bool = True,
    threads: int | None = None,
    skip_errors: bool = False,
) -> list[SetEmbedding]:
    """One embedding per set, in cohort order.

    ``bank`` may be None only for ``deepsets``. A failing set aborts with its
    id unless ``skip_errors``, in which case it is dropped from the output.
    Results do not depend on ``threads``.
    """
    if method not in EMBED_METHODS:
        raise ValidationError(f"unknown method {method!r}; valid: {', '.join(EMBED_METHODS)}")
    if bank is None and method != "deepsets":
        raise ValidationError(f"method {method!r} requires a prototype bank")
    if bank is not None and bank.d != cohort.d:
        raise ValidationError(f"bank d={bank.d} does not match cohort d={cohort.d}")

    def run(s):
        try:
            return _embed_one(s, bank, method, em_cfg, sinkhorn_cfg, normalize_counts)
        except (ValidationError, NumericalError) as exc:
            if skip_errors:
                return None
            raise type(exc)(f"set {s.id!r}: {exc}") from exc
        except Exception as exc:
            if skip_errors:
                return None
            raise RuntimeError(f"set {s.id!r}: {exc}") from exc

    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, cohort.sets))
    else:
        results = [run(s) for s in cohort.sets]
    return [r for r in results if r is not None]
