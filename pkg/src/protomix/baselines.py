"""Plain unsupervised set aggregators: element mean, hard-assignment counts,
and per-cluster means over the shared prototype bank."""

from __future__ import annotations

import numpy as np

from .embedding import SetEmbedding
from .errors import ValidationError
from .prototypes import PrototypeBank, assign_nearest


def _as_features(features: np.ndarray) -> np.ndarray:
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValidationError("features must be a non-empty N x d matrix")
    return z


def _canonical_mean(rows: np.ndarray) -> np.ndarray:
    # averaging in lexicographic row order makes the result independent of
    # the order the elements arrived in, bit for bit
    return rows[np.lexsort(rows.T[::-1])].mean(axis=0)


def deepsets_embed(features: np.ndarray, set_id: str = "") -> SetEmbedding:
    """Mean of all elements, length d."""
    z = _as_features(features)
    return SetEmbedding(
        values=_canonical_mean(z), variant="deepsets", C=0, d=z.shape[1], set_id=set_id
    )


def protocounts_embed(
    features: np.ndarray, bank: PrototypeBank, normalize: bool = True, set_id: str = ""
) -> SetEmbedding:
    """Number of elements hard-assigned to each prototype, length C.

    With ``normalize`` the counts are divided by N (the default).
    """
    z = _as_features(features)
    labels = assign_nearest(bank, z)
    counts = np.bincount(labels, minlength=bank.C).astype(np.float64)
    if normalize:
        counts /= z.shape[0]
    return SetEmbedding(
        values=counts, variant="protocounts", C=bank.C, d=bank.d, set_id=set_id
    )


def h2t_embed(features: np.ndarray, bank: PrototypeBank, set_id: str = "") -> SetEmbedding:
    """Mean of the hard-assigned elements per prototype, concatenated (C*d).

    A prototype with no assigned elements contributes a zero block; the
    affected indices are recorded under ``meta["empty_blocks"]``.
    """
    z = _as_features(features)
    labels = assign_nearest(bank, z)
    blocks = np.zeros((bank.C, z.shape[1]), dtype=np.float64)
    empty_list = []
    for c in range(bank.C):
        members = z[labels == c]
        if members.shape[0]:
            blocks[c] = _canonical_mean(members)
        else:
            empty_list.append(c)
    empty = tuple(empty_list)
    return SetEmbedding(
        values=blocks.reshape(-1),
        variant="h2t",
        C=bank.C,
        d=bank.d,
        set_id=set_id,
        meta={"empty_blocks": empty} if empty else {},
    )
