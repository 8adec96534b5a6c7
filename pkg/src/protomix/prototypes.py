"""Shared prototype bank fit by Lloyd's k-means over all pooled cohort elements.

The pooled element matrix is put into lexicographic row order before
clustering, so the result depends only on the multiset of elements, not on
the order of sets within the cohort. Fixed seed gives a bit-identical bank.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Cohort
from .errors import ParseError, ValidationError

_MAGIC = b"PBNK"
_VERSION = 1


@dataclass(frozen=True)
class KMeansConfig:
    C: int
    max_iters: int = 100
    tol: float = 1e-4
    seed: int = 0
    init: str = "kmeanspp"  # "kmeanspp" | "random_rows"

    def __post_init__(self):
        if self.C < 1:
            raise ValidationError("C must be >= 1")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not (self.tol > 0):
            raise ValidationError("tol must be > 0")
        if self.init not in ("kmeanspp", "random_rows"):
            raise ValidationError(f"unknown init {self.init!r}")


@dataclass(eq=False)
class PrototypeBank:
    """C reference vectors shared across sets, plus fit diagnostics."""

    prototypes: np.ndarray  # C x d float64
    C: int
    fit_meta: dict

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if protos.ndim != 2 or protos.shape[0] != self.C or self.C < 1:
            raise ValidationError("prototypes must be a C x d matrix with C >= 1")
        if not np.all(np.isfinite(protos)):
            raise ValidationError("prototypes must be finite")
        if len(np.unique(protos, axis=0)) != self.C:
            raise ValidationError("prototype rows must be pairwise distinct")
        protos.setflags(write=False)
        self.prototypes = protos

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]


def _pairwise_sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances via the expansion identity, clamped at 0."""
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((c, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    closest = _pairwise_sq_dists(x, centers[:1])[:, 0]
    for k in range(1, c):
        total = closest.sum()
        if total <= 0:
            raise ValidationError(
                f"fewer than C={c} distinct pooled points; cannot place all prototypes"
            )
        centers[k] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _pairwise_sq_dists(x, centers[k : k + 1])[:, 0])
    return centers


def _repair_empty_clusters(
    x: np.ndarray, centers: np.ndarray, labels: np.ndarray, counts: np.ndarray
) -> None:
    """Move each empty centroid onto the pooled point farthest from its own
    current centroid, claiming points in decreasing distance order."""
    empties = np.flatnonzero(counts == 0)
    if empties.size == 0:
        return
    dist_to_own = _pairwise_sq_dists(x, centers)[np.arange(x.shape[0]), labels]
    order = np.argsort(-dist_to_own, kind="stable")
    taken = 0
    for c in empties:
        while taken < order.size:
            candidate = order[taken]
            taken += 1
            point = x[candidate]
            if not any(np.array_equal(point, centers[k]) for k in range(centers.shape[0])):
                centers[c] = point
                labels[candidate] = c
                break
        else:
            raise ValidationError("not enough distinct pooled points to repair empty clusters")


def fit_prototypes(
    cohort: Cohort, cfg: KMeansConfig, max_points: int | None = None
) -> PrototypeBank:
    """Cluster all pooled cohort elements into C prototypes.

    ``max_points`` optionally subsamples the pool (seeded); defaults to using
    every element of every set.
    """
    pooled = cohort.pooled_features()
    if pooled.shape[0] < cfg.C:
        raise ValidationError(
            f"cohort pools {pooled.shape[0]} elements, fewer than C={cfg.C}"
        )
    rng = np.random.default_rng(cfg.seed)
    if max_points is not None and pooled.shape[0] > max_points:
        keep = rng.choice(pooled.shape[0], size=max_points, replace=False)
        pooled = pooled[keep]
        if pooled.shape[0] < cfg.C:
            raise ValidationError("max_points leaves fewer pooled elements than C")
    # canonical row order: invariant to the order of sets in the cohort
    pooled = pooled[np.lexsort(pooled.T[::-1])]

    if cfg.init == "kmeanspp":
        centers = _kmeanspp_init(pooled, cfg.C, rng)
    else:
        if len(np.unique(pooled, axis=0)) < cfg.C:
            raise ValidationError(
                f"fewer than C={cfg.C} distinct pooled points; cannot place all prototypes"
            )
        picked: list[int] = []
        while len(picked) < cfg.C:
            i = int(rng.integers(pooled.shape[0]))
            if not any(np.array_equal(pooled[i], pooled[j]) for j in picked):
                picked.append(i)
        centers = pooled[picked].copy()

    inertia_history: list[float] = []
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        d2 = _pairwise_sq_dists(pooled, centers)
        labels = np.argmin(d2, axis=1)
        inertia_history.append(float(d2[np.arange(pooled.shape[0]), labels].sum()))
        counts = np.bincount(labels, minlength=cfg.C)
        _repair_empty_clusters(pooled, centers, labels, counts)
        counts = np.bincount(labels, minlength=cfg.C).astype(np.float64)
        new_centers = np.zeros_like(centers)
        np.add.at(new_centers, labels, pooled)
        new_centers /= counts[:, None]
        shift = float(np.sqrt(np.sum((new_centers - centers) ** 2, axis=1)).max())
        centers = new_centers
        if shift < cfg.tol:
            break

    if len(np.unique(centers, axis=0)) != cfg.C:
        # coinciding means leave a centroid redundant; claim far points instead
        d2 = _pairwise_sq_dists(pooled, centers)
        labels = np.argmin(d2, axis=1)
        counts = np.bincount(labels, minlength=cfg.C)
        _repair_empty_clusters(pooled, centers, labels, counts)

    d2 = _pairwise_sq_dists(pooled, centers)
    final_inertia = float(d2.min(axis=1).sum())
    inertia_history.append(final_inertia)
    return PrototypeBank(
        prototypes=centers,
        C=cfg.C,
        fit_meta={
            "iterations_run": iterations,
            "final_inertia": final_inertia,
            "seed": cfg.seed,
            "inertia_history": inertia_history,
        },
    )


def assign_nearest(bank: PrototypeBank, features: np.ndarray) -> np.ndarray:
    """Index of the closest prototype per row; ties go to the lowest index.

    Distances are formed from explicit row differences so that a feature
    equal to a prototype is assigned to it exactly.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != bank.d:
        raise ValidationError(
            f"features must be N x {bank.d} to match the bank, got {feats.shape}"
        )
    labels = np.empty(feats.shape[0], dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, bank.C * bank.d))
    for start in range(0, feats.shape[0], chunk):
        block = feats[start : start + chunk]
        diffs = block[:, None, :] - bank.prototypes[None, :, :]
        d2 = np.sum(diffs * diffs, axis=2)
        labels[start : start + block.shape[0]] = np.argmin(d2, axis=1)
    return labels


def save_bank(bank: PrototypeBank, path: str | Path) -> None:
    meta = json.dumps(bank.fit_meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as out:
        out.write(_MAGIC)
        out.write(struct.pack("<HII", _VERSION, bank.C, bank.d))
        out.write(np.ascontiguousarray(bank.prototypes, dtype="<f4").tobytes())
        out.write(struct.pack("<I", len(meta)))
        out.write(meta)


def load_bank(path: str | Path) -> PrototypeBank:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ParseError(f"bad magic {magic!r} in {path}, expected {_MAGIC!r}")
        version, c, d = struct.unpack("<HII", fh.read(10))
        if version != _VERSION:
            raise ParseError(f"unsupported bank format version {version}")
        raw = fh.read(c * d * 4)
        if len(raw) != c * d * 4:
            raise ParseError(f"truncated prototype matrix in {path}")
        protos = np.frombuffer(raw, dtype="<f4").reshape(c, d).astype(np.float64)
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
    return PrototypeBank(prototypes=protos, C=c, fit_meta=meta)
