"""Prototype-oriented views of a fitted set: per-element argmax assignments,
per-prototype posterior heatmaps, and mixture-weight summaries.

Exports: per-set CSV ``x,y,assigned,q0,...,q{C-1}``; dense rasters over the
coordinate bounding box as binary PGM (P5, min-max scaled to 0..255) plus a
raw matrix file (magic ``PMAT`` | rows u32 | cols u32 | f32 data, little-
endian). Grid holes are -1 in both raster types.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .mixture import MixtureParams, PosteriorMatrix

_MAT_MAGIC = b"PMAT"


@dataclass(eq=False)
class AssignmentMap:
    """Argmax prototype per element, full posterior rows, and the set's pi."""

    set_id: str
    assigned: np.ndarray  # N, int
    q: np.ndarray  # N x C
    pi_hat: np.ndarray  # C
    coords: np.ndarray | None = None  # N x 2 int

    def __post_init__(self):
        assigned = np.asarray(self.assigned, dtype=np.int64)
        q = np.asarray(self.q, dtype=np.float64)
        pi = np.asarray(self.pi_hat, dtype=np.float64)
        if q.ndim != 2 or assigned.shape != (q.shape[0],) or pi.shape != (q.shape[1],):
            raise ValidationError("inconsistent assignment map shapes")
        if np.any(assigned != q.argmax(axis=1)):
            raise ValidationError("assigned must be the argmax of each q row")
        if np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("q rows must sum to 1")
        if abs(float(pi.sum()) - 1.0) > 1e-9:
            raise ValidationError("pi_hat must sum to 1")
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=np.int64)
            if coords.shape != (q.shape[0], 2):
                raise ValidationError("coords must be N x 2")
            self.coords = coords
        self.assigned, self.q, self.pi_hat = assigned, q, pi

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def C(self) -> int:
        return self.q.shape[1]


def assignment_map(
    features: np.ndarray,
    posteriors: PosteriorMatrix,
    params: MixtureParams,
    coords: np.ndarray | None = None,
) -> AssignmentMap:
    """Bundle the argmax labeling (ties to the lowest index) with q and pi."""
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] != posteriors.n:
        raise ValidationError("features and posteriors disagree on N")
    if params.C != posteriors.C:
        raise ValidationError("params and posteriors disagree on C")
    return AssignmentMap(
        set_id="",
        assigned=posteriors.q.argmax(axis=1),
        q=posteriors.q,
        pi_hat=params.pi,
        coords=coords,
    )


def prototype_heatmap(posteriors: PosteriorMatrix, c_star: int) -> np.ndarray:
    """Per-element posterior mass of one prototype (column c_star of q)."""
    if not 0 <= c_star < posteriors.C:
        raise ValidationError(f"c_star {c_star} out of range for C={posteriors.C}")
    return posteriors.q[:, c_star].copy()


@dataclass(eq=False)
class PiTable:
    """Per-set mixture-weight rows followed by per-label mean rows."""

    C: int
    row_ids: list[str]
    rows: np.ndarray  # len(row_ids) x C

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row"] + [f"pi{c}" for c in range(self.C)])
            for rid, row in zip(self.row_ids, self.rows):
                writer.writerow([rid] + ["%.9g" % v for v in row])


def cohort_pi_table(maps: list[AssignmentMap], labels=None) -> PiTable:
    """Stack every set's pi_hat; with labels, append one mean row per label."""
    if not maps:
        raise ValidationError("no assignment maps given")
    c = maps[0].C
    for m in maps:
        if m.C != c:
            raise ValidationError(f"set {m.set_id!r} has C={m.C}, expected {c}")
    row_ids = [m.set_id for m in maps]
    rows = np.stack([m.pi_hat for m in maps])
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape[0] != len(maps):
            raise ValidationError("labels must align with maps")
        mean_ids, mean_rows = [], []
        for value in np.unique(labels):
            mean_ids.append(f"label:{value}:mean")
            mean_rows.append(rows[labels == value].mean(axis=0))
        row_ids = row_ids + mean_ids
        rows = np.concatenate([rows, np.stack(mean_rows)])
    return PiTable(C=c, row_ids=row_ids, rows=rows)


# ---------------------------------------------------------------------------
# exports


def write_assignment_csv(amap: AssignmentMap, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "assigned"] + [f"q{c}" for c in range(amap.C)])
        for i in range(amap.n):
            xy = (
                [str(int(amap.coords[i, 0])), str(int(amap.coords[i, 1]))]
                if amap.coords is not None
                else ["", ""]
            )
            writer.writerow(xy + [str(int(amap.assigned[i]))] + ["%.9g" % v for v in amap.q[i]])


def _grid_origin(amap: AssignmentMap) -> tuple[np.ndarray, int, int]:
    if amap.coords is None:
        raise ValidationError(f"set {amap.set_id!r} has no coords; cannot rasterize")
    mins = amap.coords.min(axis=0)
    spans = amap.coords.max(axis=0) - mins + 1
    return amap.coords - mins, int(spans[1]), int(spans[0])  # (shifted, height, width)


def assignment_raster(amap: AssignmentMap) -> np.ndarray:
    """Dense int matrix over the coord bounding box; -1 marks holes."""
    shifted, height, width = _grid_origin(amap)
    grid = np.full((height, width), -1, dtype=np.int64)
    grid[shifted[:, 1], shifted[:, 0]] = amap.assigned
    return grid


def heatmap_raster(amap: AssignmentMap, c_star: int) -> np.ndarray:
    """Dense float32 matrix of one prototype's posterior; -1 marks holes."""
    if not 0 <= c_star < amap.C:
        raise ValidationError(f"c_star {c_star} out of range for C={amap.C}")
    shifted, height, width = _grid_origin(amap)
    grid = np.full((height, width), -1.0, dtype=np.float32)
    grid[shifted[:, 1], shifted[:, 0]] = amap.q[:, c_star].astype(np.float32)
    return grid


def write_pgm(matrix: np.ndarray, path: str | Path) -> None:
    """Binary PGM (P5) with values min-max scaled to 0..255."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError("raster must be 2-D")
    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo) * 255.0
    data = np.round(scaled).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_f32_matrix(matrix: np.ndarray, path: str | Path) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValidationError("matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_MAT_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def load_f32_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAT_MAGIC:
            raise ParseError(f"bad magic {magic!r} in {path}, expected {_MAT_MAGIC!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        raw = fh.read(rows * cols * 4)
        if len(raw) != rows * cols * 4:
            raise ParseError(f"truncated matrix file {path}")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()
