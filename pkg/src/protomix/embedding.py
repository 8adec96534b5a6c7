"""Fixed-length set embeddings: container, per-variant layouts, file formats.

Every aggregation method produces a flat vector whose length is fully
determined by the variant and the (C, d) pair:

    all          C * (1 + 2d)   [pi, mu, sigma] per prototype, concatenated
    wa           2d             pi-weighted average of means and variances
    top, bottom  1 + 2d         block of the largest / smallest pi component
    deepsets     d              element mean (no prototype structure, C = 0)
    protocounts  C              hard-assignment counts
    h2t, ot      C * d          one d-block per prototype

``block_layout`` names the disjoint slices covering the vector; predictor
heads use it to apply per-prototype maps, CSV export derives column names
from it.

Binary embedding file, little-endian: magic ``PEMB`` | version u16 |
variant u8 | C u32 | d u32 | num_sets u32 | per set: id_len u16, id utf-8,
f32 vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

_MAGIC = b"PEMB"
_VERSION = 1

VARIANTS = ("all", "wa", "top", "bottom", "deepsets", "protocounts", "h2t", "ot")

BlockSlice = tuple[str, int, int]  # (label, start, stop)


def expected_length(variant: str, C: int, d: int) -> int:
    if variant == "all":
        return C * (1 + 2 * d)
    if variant == "wa":
        return 2 * d
    if variant in ("top", "bottom"):
        return 1 + 2 * d
    if variant == "deepsets":
        return d
    if variant == "protocounts":
        return C
    if variant in ("h2t", "ot"):
        return C * d
    raise ValidationError(f"unknown embedding variant {variant!r}")


def standard_layout(variant: str, C: int, d: int) -> tuple[BlockSlice, ...]:
    m = 1 + 2 * d
    if variant == "all":
        return tuple((f"p{c}", c * m, (c + 1) * m) for c in range(C))
    if variant == "wa":
        return (("wmu", 0, d), ("wsigma", d, 2 * d))
    if variant in ("top", "bottom"):
        return (("p", 0, m),)
    if variant == "deepsets":
        return (("mean", 0, d),)
    if variant == "protocounts":
        return (("counts", 0, C),)
    if variant in ("h2t", "ot"):
        return tuple((f"p{c}", c * d, (c + 1) * d) for c in range(C))
    raise ValidationError(f"unknown embedding variant {variant!r}")


@dataclass(eq=False)
class SetEmbedding:
    """One set's fixed-length embedding vector plus its block structure."""

    values: np.ndarray
    variant: str
    C: int
    d: int
    set_id: str = ""
    block_layout: tuple[BlockSlice, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown embedding variant {self.variant!r}")
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        want = expected_length(self.variant, self.C, self.d)
        if values.shape[0] != want:
            raise ValidationError(
                f"variant {self.variant!r} with C={self.C}, d={self.d} requires "
                f"length {want}, got {values.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"embedding values must be finite (set {self.set_id!r})")
        if self.block_layout is None:
            self.block_layout = standard_layout(self.variant, self.C, self.d)
        covered = sorted((start, stop) for _, start, stop in self.block_layout)
        pos = 0
        for start, stop in covered:
            if start != pos or stop < start:
                raise ValidationError("block_layout slices must be disjoint and cover the vector")
            pos = stop
        if pos != values.shape[0]:
            raise ValidationError("block_layout slices must cover the whole vector")
        values.setflags(write=False)
        self.values = values

    def __len__(self) -> int:
        return self.values.shape[0]

    def block(self, index: int) -> np.ndarray:
        _, start, stop = self.block_layout[index]
        return self.values[start:stop]

    @property
    def block_dims(self) -> tuple[int, ...]:
        return tuple(stop - start for _, start, stop in self.block_layout)


def column_names(variant: str, C: int, d: int) -> list[str]:
    """Block-qualified CSV column names for one embedding vector."""
    if variant == "all":
        names = []
        for c in range(C):
            names.append(f"p{c}.pi")
            names.extend(f"p{c}.mu.{j}" for j in range(d))
            names.extend(f"p{c}.sigma.{j}" for j in range(d))
        return names
    if variant == "wa":
        return [f"wmu.{j}" for j in range(d)] + [f"wsigma.{j}" for j in range(d)]
    if variant in ("top", "bottom"):
        return ["p.pi"] + [f"p.mu.{j}" for j in range(d)] + [f"p.sigma.{j}" for j in range(d)]
    if variant == "deepsets":
        return [f"mean.{j}" for j in range(d)]
    if variant == "protocounts":
        return [f"counts.{c}" for c in range(C)]
    if variant in ("h2t", "ot"):
        return [f"p{c}.{j}" for c in range(C) for j in range(d)]
    raise ValidationError(f"unknown embedding variant {variant!r}")


def save_embeddings(embeddings: list[SetEmbedding], path: str | Path) -> None:
    """Write embeddings (all of one variant and shape) as a binary file."""
    if not embeddings:
        raise ValidationError("cannot save an empty embedding list")
    first = embeddings[0]
    for e in embeddings:
        if (e.variant, e.C, e.d) != (first.variant, first.C, first.d):
            raise ValidationError("embeddings in one file must share variant, C, and d")
    with open(path, "wb") as out:
        out.write(_MAGIC)
        out.write(
            struct.pack(
                "<HBIII",
                _VERSION,
                VARIANTS.index(first.variant),
                first.C,
                first.d,
                len(embeddings),
            )
        )
        for e in embeddings:
            id_bytes = e.set_id.encode("utf-8")
            out.write(struct.pack("<H", len(id_bytes)))
            out.write(id_bytes)
            out.write(np.ascontiguousarray(e.values, dtype="<f4").tobytes())


def load_embeddings(path: str | Path) -> list[SetEmbedding]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ParseError(f"bad magic {magic!r} in {path}, expected {_MAGIC!r}")
        header = fh.read(15)
        if len(header) != 15:
            raise ParseError(f"truncated embedding header in {path}")
        version, tag, c, d, num_sets = struct.unpack("<HBIII", header)
        if version != _VERSION:
            raise ParseError(f"unsupported embedding format version {version}")
        if tag >= len(VARIANTS):
            raise ParseError(f"unknown variant tag {tag} in {path}")
        variant = VARIANTS[tag]
        length = expected_length(variant, c, d)
        out = []
        for i in range(num_sets):
            raw = fh.read(2)
            if len(raw) != 2:
                raise ParseError(f"truncated embedding file at set #{i}")
            (id_len,) = struct.unpack("<H", raw)
            set_id = fh.read(id_len).decode("utf-8")
            raw = fh.read(length * 4)
            if len(raw) != length * 4:
                raise ParseError("truncated embedding vector", set_id=set_id)
            values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            out.append(SetEmbedding(values=values, variant=variant, C=c, d=d, set_id=set_id))
    return out


def export_embeddings_csv(embeddings: list[SetEmbedding], path: str | Path) -> None:
    """One row per set with block-qualified column names."""
    if not embeddings:
        raise ValidationError("cannot export an empty embedding list")
    first = embeddings[0]
    names = column_names(first.variant, first.C, first.d)
    with open(path, "w") as fh:
        fh.write(",".join(["id"] + names) + "\n")
        for e in embeddings:
            fh.write(",".join([e.set_id] + ["%.9g" % v for v in e.values]) + "\n")
