"""Core containers for sets of feature vectors, cohorts, and their file formats.

A cohort is a list of embedding sets (bags). Each set holds an N x d float32
feature matrix, optional integer grid coordinates per element, and an optional
prediction target (class label or survival time/event).

Two on-disk formats are supported:

* binary (lossless round-trip), layout little-endian:
    magic ``PAGG`` | version u16 | d u32 | num_sets u32 | per set:
    id_len u16, id utf-8, N u32, flags u8 (bit0 coords, bit1 class,
    bit2 survival), [class u32] or [time f64, event u8],
    [coords N x 2 i32], features N x d f32 row-major.
* csv: a manifest file ``id,path,label,time,event`` plus one file per set with
  header ``x,y,f0,...,f{d-1}`` (x,y cells empty when the set has no coords);
  values are preserved to 9 significant digits, which round-trips float32.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

_MAGIC = b"PAGG"
_VERSION = 1

_FLAG_COORDS = 1
_FLAG_CLASS = 2
_FLAG_SURVIVAL = 4


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Target:
    """Per-set prediction target: a class label or a survival observation."""

    kind: str  # "class_label" | "survival"
    class_label: int | None = None
    time: float | None = None
    event: bool | None = None

    def __post_init__(self):
        if self.kind == "class_label":
            if self.class_label is None or self.time is not None or self.event is not None:
                raise ValidationError("target kind 'class_label' requires class_label only")
            if self.class_label < 0:
                raise ValidationError("class_label must be non-negative")
        elif self.kind == "survival":
            if self.class_label is not None or self.time is None or self.event is None:
                raise ValidationError("target kind 'survival' requires time and event only")
            if not (self.time > 0 and np.isfinite(self.time)):
                raise ValidationError("time must be a positive finite float")
        else:
            raise ValidationError(f"unknown target kind {self.kind!r}")


@dataclass(eq=False)
class EmbeddingSet:
    """One bag: N feature vectors of dimension d with optional metadata."""

    id: str
    features: np.ndarray  # N x d float32
    coords: np.ndarray | None = None  # N x 2 int32 grid positions
    target: Target | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValidationError(f"features must be a non-empty N x d matrix (set {self.id!r})")
        if not np.all(np.isfinite(feats)):
            bad = int(np.argwhere(~np.isfinite(feats).all(axis=1))[0, 0])
            raise ParseError("non-finite feature value", set_id=self.id, row=bad)
        self.features = _freeze(np.ascontiguousarray(feats))
        if self.coords is not None:
            coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int32))
            if coords.shape != (feats.shape[0], 2):
                raise ValidationError(
                    f"coords must be N x 2 and match features (set {self.id!r})"
                )
            if len(np.unique(coords, axis=0)) != coords.shape[0]:
                raise ValidationError(f"coords rows must be distinct (set {self.id!r})")
            self.coords = _freeze(coords)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        same_coords = (
            (self.coords is None and other.coords is None)
            or (
                self.coords is not None
                and other.coords is not None
                and np.array_equal(self.coords, other.coords)
            )
        )
        return (
            self.id == other.id
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and same_coords
            and self.target == other.target
        )


@dataclass(eq=False)
class Cohort:
    """A non-empty list of embedding sets sharing one feature dimension."""

    sets: list[EmbeddingSet]
    d: int
    num_classes: int | None = None

    def __post_init__(self):
        if not self.sets:
            raise ValidationError("cohort must contain at least one set")
        for s in self.sets:
            if s.d != self.d:
                raise ValidationError(
                    f"set {s.id!r} has dimension {s.d}, cohort declares d={self.d}"
                )
        if self.num_classes is not None:
            for s in self.sets:
                t = s.target
                if t is not None and t.kind == "class_label" and t.class_label >= self.num_classes:
                    raise ValidationError(
                        f"set {s.id!r} label {t.class_label} >= num_classes {self.num_classes}"
                    )

    def __len__(self) -> int:
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)

    def total_elements(self) -> int:
        return sum(s.n for s in self.sets)

    def pooled_features(self) -> np.ndarray:
        """All elements of all sets stacked into one matrix (float64)."""
        return np.concatenate([s.features.astype(np.float64) for s in self.sets], axis=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        return (
            self.d == other.d
            and self.num_classes == other.num_classes
            and len(self.sets) == len(other.sets)
            and all(a == b for a, b in zip(self.sets, other.sets))
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a planted-mixture cohort.

    Elements of a set are drawn categorically over the planted components
    using the set's class profile, then perturbed by Gaussian noise with
    per-dimension std ``noise_sigma * sqrt(component_variances)``; at
    noise_sigma=0 every element equals its component mean exactly.

    When ``survival_mean_times`` is given, sets carry survival targets
    (exponential event times with per-class means, optional exponential
    censoring) instead of class labels.
    """

    num_sets: int
    d: int
    component_means: tuple[tuple[float, ...], ...]  # K x d
    component_variances: tuple[tuple[float, ...], ...]  # K x d, diagonal
    proportion_profiles: tuple[tuple[float, ...], ...]  # per class, length K
    n_range: tuple[int, int]
    noise_sigma: float
    seed: int
    survival_mean_times: tuple[float, ...] | None = None
    censor_mean_time: float | None = None

    def __post_init__(self):
        if self.num_sets < 1:
            raise ValidationError("num_sets must be >= 1")
        if self.d < 1:
            raise ValidationError("d must be >= 1")
        means = np.asarray(self.component_means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2 or means.shape[1] != self.d:
            raise ValidationError("component_means must be K x d with K >= 2")
        variances = np.asarray(self.component_variances, dtype=np.float64)
        if variances.shape != means.shape:
            raise ValidationError("component_variances must match component_means shape")
        if np.any(variances < 0):
            raise ValidationError("component_variances must be non-negative")
        k = means.shape[0]
        if not self.proportion_profiles:
            raise ValidationError("proportion_profiles must be non-empty")
        for i, profile in enumerate(self.proportion_profiles):
            p = np.asarray(profile, dtype=np.float64)
            if p.shape != (k,):
                raise ValidationError(f"proportion_profiles[{i}] must have length K={k}")
            if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
                raise ValidationError(f"proportion_profiles[{i}] must sum to 1")
        lo, hi = self.n_range
        if lo < 1 or hi < lo:
            raise ValidationError("n_range must satisfy 1 <= min <= max")
        if not (self.noise_sigma >= 0):
            raise ValidationError("noise_sigma must be >= 0")
        if self.survival_mean_times is not None:
            if len(self.survival_mean_times) != len(self.proportion_profiles):
                raise ValidationError("survival_mean_times must have one entry per class")
            if any(t <= 0 for t in self.survival_mean_times):
                raise ValidationError("survival_mean_times entries must be positive")
        if self.censor_mean_time is not None and self.censor_mean_time <= 0:
            raise ValidationError("censor_mean_time must be positive")

    @property
    def num_components(self) -> int:
        return len(self.component_means)

    @property
    def num_classes(self) -> int:
        return len(self.proportion_profiles)


def generate_synthetic_cohort(spec: SyntheticSpec) -> Cohort:
    """Draw a cohort from the planted mixture. Pure function of the spec.

    Set i belongs to class ``i % num_classes``; sizes are uniform over
    ``n_range`` inclusive. Every set also carries grid coords laid out
    row-major on an almost-square grid, which downstream raster exports use.
    """
    rng = np.random.default_rng(spec.seed)
    means = np.asarray(spec.component_means, dtype=np.float64)
    stds = spec.noise_sigma * np.sqrt(np.asarray(spec.component_variances, dtype=np.float64))
    profiles = [np.asarray(p, dtype=np.float64) for p in spec.proportion_profiles]
    lo, hi = spec.n_range

    sets = []
    for i in range(spec.num_sets):
        cls = i % spec.num_classes
        n = int(rng.integers(lo, hi + 1))
        components = rng.choice(spec.num_components, size=n, p=profiles[cls])
        noise = rng.standard_normal((n, spec.d))
        feats = means[components] + stds[components] * noise
        width = int(np.ceil(np.sqrt(n)))
        idx = np.arange(n, dtype=np.int32)
        coords = np.stack([idx % width, idx // width], axis=1)
        if spec.survival_mean_times is not None:
            t_event = float(rng.exponential(spec.survival_mean_times[cls]))
            t_event = max(t_event, 1e-9)
            if spec.censor_mean_time is not None:
                t_censor = float(rng.exponential(spec.censor_mean_time))
                target = Target(
                    kind="survival",
                    time=max(min(t_event, t_censor), 1e-9),
                    event=bool(t_event <= t_censor),
                )
            else:
                target = Target(kind="survival", time=t_event, event=True)
        else:
            target = Target(kind="class_label", class_label=cls)
        sets.append(
            EmbeddingSet(
                id=f"set-{i:05d}",
                features=feats.astype(np.float32),
                coords=coords,
                target=target,
            )
        )
    num_classes = None if spec.survival_mean_times is not None else spec.num_classes
    return Cohort(sets=sets, d=spec.d, num_classes=num_classes)


# ---------------------------------------------------------------------------
# binary format


def _write_set_binary(out, s: EmbeddingSet) -> None:
    id_bytes = s.id.encode("utf-8")
    if len(id_bytes) > 0xFFFF:
        raise ValidationError(f"set id too long: {s.id!r}")
    flags = 0
    if s.coords is not None:
        flags |= _FLAG_COORDS
    t = s.target
    if t is not None and t.kind == "class_label":
        flags |= _FLAG_CLASS
    if t is not None and t.kind == "survival":
        flags |= _FLAG_SURVIVAL
    out.write(struct.pack("<H", len(id_bytes)))
    out.write(id_bytes)
    out.write(struct.pack("<IB", s.n, flags))
    if flags & _FLAG_CLASS:
        out.write(struct.pack("<I", t.class_label))
    if flags & _FLAG_SURVIVAL:
        out.write(struct.pack("<dB", t.time, 1 if t.event else 0))
    if flags & _FLAG_COORDS:
        out.write(np.ascontiguousarray(s.coords, dtype="<i4").tobytes())
    out.write(np.ascontiguousarray(s.features, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated file while reading {what}")
    return buf


def _read_set_binary(fh, d: int, index: int) -> EmbeddingSet:
    (id_len,) = struct.unpack("<H", _read_exact(fh, 2, f"id length of set #{index}"))
    set_id = _read_exact(fh, id_len, f"id of set #{index}").decode("utf-8")
    n, flags = struct.unpack("<IB", _read_exact(fh, 5, f"header of set {set_id!r}"))
    if n < 1:
        raise ParseError("set has no elements", set_id=set_id)
    target = None
    if flags & _FLAG_CLASS and flags & _FLAG_SURVIVAL:
        raise ParseError("set declares both class and survival targets", set_id=set_id)
    if flags & _FLAG_CLASS:
        (label,) = struct.unpack("<I", _read_exact(fh, 4, "class label"))
        target = Target(kind="class_label", class_label=int(label))
    if flags & _FLAG_SURVIVAL:
        time, event = struct.unpack("<dB", _read_exact(fh, 9, "survival target"))
        target = Target(kind="survival", time=float(time), event=bool(event))
    coords = None
    if flags & _FLAG_COORDS:
        raw = _read_exact(fh, n * 2 * 4, f"coords of set {set_id!r}")
        coords = np.frombuffer(raw, dtype="<i4").reshape(n, 2).astype(np.int32)
    raw = _read_exact(fh, n * d * 4, f"features of set {set_id!r}")
    feats = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float32)
    if not np.all(np.isfinite(feats)):
        bad = int(np.argwhere(~np.isfinite(feats).all(axis=1))[0, 0])
        raise ParseError("non-finite feature value", set_id=set_id, row=bad)
    return EmbeddingSet(id=set_id, features=feats, coords=coords, target=target)


def save_cohort(cohort: Cohort, path: str | Path, format: str = "binary") -> None:
    """Write a cohort to disk in the requested format."""
    path = Path(path)
    if format == "binary":
        try:
            with open(path, "wb") as out:
                out.write(_MAGIC)
                out.write(struct.pack("<HII", _VERSION, cohort.d, len(cohort.sets)))
                for s in cohort.sets:
                    _write_set_binary(out, s)
        except OSError as exc:
            raise OSError(f"failed to write cohort to {path}: {exc}") from exc
    elif format == "csv":
        _save_cohort_csv(cohort, path)
    else:
        raise ValidationError(f"unknown cohort format {format!r}")


def load_cohort(path: str | Path, format: str = "binary") -> Cohort:
    """Read a cohort written by :func:`save_cohort`."""
    path = Path(path)
    if format == "binary":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise ParseError(f"bad magic {magic!r} in {path}, expected {_MAGIC!r}")
            version, d, num_sets = struct.unpack("<HII", _read_exact(fh, 10, "header"))
            if version != _VERSION:
                raise ParseError(f"unsupported cohort format version {version}")
            sets = [_read_set_binary(fh, d, i) for i in range(num_sets)]
            if fh.read(1):
                raise ParseError(f"trailing bytes after last set in {path}")
    elif format == "csv":
        sets, d = _load_cohort_csv(path)
    else:
        raise ValidationError(f"unknown cohort format {format!r}")
    labels = [
        s.target.class_label
        for s in sets
        if s.target is not None and s.target.kind == "class_label"
    ]
    num_classes = max(labels) + 1 if labels else None
    return Cohort(sets=sets, d=d, num_classes=num_classes)


# ---------------------------------------------------------------------------
# csv format


def _fmt(x: float) -> str:
    return "%.9g" % x


def _save_cohort_csv(cohort: Cohort, manifest_path: Path) -> None:
    directory = manifest_path.parent
    directory.mkdir(parents=True, exist_ok=True)
    stem = manifest_path.stem
    rows = []
    for i, s in enumerate(cohort.sets):
        set_file = f"{stem}_set{i:05d}.csv"
        with open(directory / set_file, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y"] + [f"f{j}" for j in range(cohort.d)])
            for r in range(s.n):
                xy = [str(int(s.coords[r, 0])), str(int(s.coords[r, 1]))] if s.coords is not None else ["", ""]
                writer.writerow(xy + [_fmt(v) for v in s.features[r]])
        label = time = event = ""
        if s.target is not None:
            if s.target.kind == "class_label":
                label = str(s.target.class_label)
            else:
                time = repr(s.target.time)
                event = "1" if s.target.event else "0"
        rows.append([s.id, set_file, label, time, event])
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "label", "time", "event"])
        writer.writerows(rows)


def _load_cohort_csv(manifest_path: Path) -> tuple[list[EmbeddingSet], int]:
    directory = manifest_path.parent
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "path", "label", "time", "event"]:
            raise ParseError(f"bad manifest header in {manifest_path}: {header}")
        entries = [row for row in reader if row]

    sets: list[EmbeddingSet] = []
    d: int | None = None
    for set_id, rel_path, label, time, event in entries:
        target = None
        if label:
            target = Target(kind="class_label", class_label=int(label))
        elif time:
            target = Target(kind="survival", time=float(time), event=event == "1")
        feats, coords = _read_set_csv(directory / rel_path, set_id)
        if d is None:
            d = feats.shape[1]
        elif feats.shape[1] != d:
            raise ParseError(
                f"feature dimension {feats.shape[1]} does not match cohort d={d}",
                set_id=set_id,
            )
        sets.append(EmbeddingSet(id=set_id, features=feats, coords=coords, target=target))
    if d is None:
        raise ParseError(f"manifest {manifest_path} lists no sets")
    return sets, d


def _read_set_csv(path: Path, set_id: str) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["x", "y"]:
            raise ParseError(f"bad per-set header in {path}", set_id=set_id)
        d = len(header) - 2
        if d < 1:
            raise ParseError("per-set file has no feature columns", set_id=set_id)
        feats_rows, coord_rows = [], []
        has_coords: bool | None = None
        for r, row in enumerate(reader):
            if not row:
                continue
            if len(row) != d + 2:
                raise ParseError(f"expected {d + 2} cells, got {len(row)}", set_id=set_id, row=r)
            row_has_coords = row[0] != "" and row[1] != ""
            if has_coords is None:
                has_coords = row_has_coords
            elif has_coords != row_has_coords:
                raise ParseError("mixed presence of coords", set_id=set_id, row=r)
            if row_has_coords:
                coord_rows.append((int(row[0]), int(row[1])))
            try:
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(f"bad feature value: {exc}", set_id=set_id, row=r) from exc
            if not all(np.isfinite(values)):
                raise ParseError("non-finite feature value", set_id=set_id, row=r)
            feats_rows.append(values)
    if not feats_rows:
        raise ParseError("per-set file has no rows", set_id=set_id)
    feats = np.asarray(feats_rows, dtype=np.float32)
    coords = np.asarray(coord_rows, dtype=np.int32) if coord_rows else None
    return feats, coords


def class_labels(cohort: Cohort) -> np.ndarray:
    """Class label per set; raises if any set lacks a class target."""
    labels = []
    for s in cohort.sets:
        if s.target is None or s.target.kind != "class_label":
            raise ValidationError(f"set {s.id!r} has no class label")
        labels.append(s.target.class_label)
    return np.asarray(labels, dtype=np.int64)


def survival_targets(cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    """(times, events) per set; raises if any set lacks a survival target."""
    times, events = [], []
    for s in cohort.sets:
        if s.target is None or s.target.kind != "survival":
            raise ValidationError(f"set {s.id!r} has no survival target")
        times.append(s.target.time)
        events.append(s.target.event)
    return np.asarray(times, dtype=np.float64), np.asarray(events, dtype=bool)
