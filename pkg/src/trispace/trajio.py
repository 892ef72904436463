"""Trajectory records, CSV I/O, min-max normalization and mean padding.

A trajectory is held as an ``(M, 6)`` float array with columns
``t, lon, lat, speed, heading, event``.  Everything downstream consumes the
padded :class:`TemporalTensor` built by :func:`pad_and_mask`.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURES = ("t", "lon", "lat", "speed", "heading", "event")
N_FEATURES = len(FEATURES)
POINT_HEADER = ("traj_id",) + FEATURES
LABEL_HEADER = ("traj_id", "arrival_time")
EVENT_CODES = (0, 1, 2, 3, 4, 5)
DEFAULT_CAP = 2000

T, LON, LAT, SPEED, HEADING, EVENT = range(N_FEATURES)


class TrajectoryPoint(NamedTuple):
    t: float
    lon: float
    lat: float
    speed: float
    heading: float
    event: int


class DataError(ValueError):
    """Raised for input that violates the trajectory data contract."""


@dataclass
class Trajectory:
    id: str
    points: np.ndarray
    label: float | None = None
    region: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != N_FEATURES or len(pts) == 0:
            raise DataError(f"trajectory {self.id!r}: points must be (M>=1, 6), got {pts.shape}")
        if np.any(np.diff(pts[:, T]) < 0):
            raise DataError(f"trajectory {self.id!r}: timestamps must be nondecreasing")
        self.points = pts

    @classmethod
    def from_points(cls, traj_id, points: Iterable[TrajectoryPoint], label=None, region=None):
        return cls(traj_id, np.array([tuple(p) for p in points], dtype=np.float64), label, region)

    def __len__(self):
        return len(self.points)

    def iter_points(self):
        for row in self.points:
            yield TrajectoryPoint(*row[:5].tolist(), int(row[EVENT]))

    def offsets(self) -> np.ndarray:
        """Points with timestamps re-expressed as seconds from the first point."""
        pts = self.points.copy()
        pts[:, T] -= pts[0, T]
        return pts


@dataclass
class RowIssue:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


@dataclass
class ParseResult:
    trajectories: list[Trajectory]
    issues: list[RowIssue] = field(default_factory=list)
    n_duplicates: int = 0
    n_dropped: int = 0


def _open_text(stream) -> IO[str]:
    if isinstance(stream, (bytes, bytearray)):
        return io.StringIO(bytes(stream).decode("utf-8"), newline="")
    if isinstance(stream, io.TextIOBase) or hasattr(stream, "encoding"):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8", newline="")


def _check_header(got, expected, what):
    got = [h.strip() for h in got]
    if tuple(got[: len(expected)]) != tuple(expected):
        raise DataError(f"{what}: expected header {','.join(expected)}, got {','.join(got)}")
    return got


def parse_labels(stream) -> tuple[dict[str, float], dict[str, str]]:
    """Read ``traj_id,arrival_time[,region]`` into label and region maps."""
    reader = csv.reader(_open_text(stream))
    try:
        header = _check_header(next(reader), LABEL_HEADER, "labels CSV")
    except StopIteration:
        return {}, {}
    has_region = len(header) > 2 and header[2] == "region"
    labels, regions = {}, {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"labels CSV line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            y = float(row[1])
        except ValueError:
            raise DataError(f"labels CSV line {lineno}: non-numeric arrival_time {row[1]!r}") from None
        if not math.isfinite(y):
            raise DataError(f"labels CSV line {lineno}: arrival_time must be finite")
        labels[row[0]] = y
        if has_region:
            regions[row[0]] = row[2]
    return labels, regions


def parse_points(stream, labels=None, strict: bool = False) -> ParseResult:
    """Parse a point CSV into trajectories grouped by ``traj_id`` and sorted by time.

    Bad rows are skipped and reported in :attr:`ParseResult.issues` with their
    line number (header is line 1).  Duplicate ``(traj_id, t)`` pairs keep the
    first occurrence.  With ``strict=True`` the first bad row raises
    :class:`DataError` instead.

    Args:
        stream: text or binary stream, or raw bytes.
        labels: optional labels stream, or a pre-parsed ``(labels, regions)`` pair.
    """
    reader = csv.reader(_open_text(stream))
    try:
        _check_header(next(reader), POINT_HEADER, "points CSV")
    except StopIteration:
        return ParseResult([])

    issues: list[RowIssue] = []
    groups: dict[str, list[tuple]] = {}
    seen: dict[str, set] = {}
    n_dup = 0
    ids_with_rows: set[str] = set()

    def bad(lineno, msg):
        if strict:
            raise DataError(f"line {lineno}: {msg}")
        issues.append(RowIssue(lineno, msg))

    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(POINT_HEADER):
            bad(lineno, f"expected {len(POINT_HEADER)} fields, got {len(row)}")
            continue
        tid = row[0]
        ids_with_rows.add(tid)
        try:
            t, lon, lat, speed, heading = (float(x) for x in row[1:6])
            event_f = float(row[6])
        except ValueError:
            bad(lineno, "non-numeric field")
            continue
        if not all(math.isfinite(v) for v in (t, lon, lat, speed, heading, event_f)):
            bad(lineno, "non-finite field")
            continue
        if event_f not in EVENT_CODES:
            bad(lineno, f"event {row[6]} outside 0..5")
            continue
        if speed < 0:
            bad(lineno, f"negative speed {speed}")
            continue
        if not 0 <= heading < 360:
            bad(lineno, f"heading {heading} outside [0, 360)")
            continue
        if t in seen.setdefault(tid, set()):
            n_dup += 1
            continue
        seen[tid].add(t)
        groups.setdefault(tid, []).append((t, lon, lat, speed, heading, event_f))

    if labels is None:
        label_map, region_map = {}, {}
    elif isinstance(labels, tuple):
        label_map, region_map = labels
    else:
        label_map, region_map = parse_labels(labels)

    trajs = []
    for tid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        trajs.append(Trajectory(tid, np.array(rows), label_map.get(tid), region_map.get(tid)))
    n_dropped = len(ids_with_rows - groups.keys())
    if n_dropped:
        logger.warning("dropped %d trajectories with no valid rows", n_dropped)
    if n_dup:
        logger.warning("ignored %d duplicate (traj_id, t) rows", n_dup)
    if issues:
        logger.warning("rejected %d malformed rows", len(issues))
    return ParseResult(trajs, issues, n_dup, n_dropped)


def write_points(trajs: Sequence[Trajectory], stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(POINT_HEADER)
    for tr in trajs:
        for p in tr.iter_points():
            w.writerow([tr.id, repr(p.t), repr(p.lon), repr(p.lat), repr(p.speed), repr(p.heading), p.event])


def write_labels(trajs: Sequence[Trajectory], stream: IO[str], with_region: bool | None = None) -> None:
    if with_region is None:
        with_region = any(tr.region is not None for tr in trajs)
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(LABEL_HEADER + (("region",) if with_region else ()))
    for tr in trajs:
        if tr.label is None:
            continue
        row = [tr.id, repr(float(tr.label))]
        if with_region:
            row.append(tr.region or "")
        w.writerow(row)


@dataclass
class NormParams:
    """Per-feature min/max fit on the training split, plus the label range."""

    mins: np.ndarray
    maxs: np.ndarray
    label_min: float | None = None
    label_max: float | None = None

    def transform(self, pts: np.ndarray) -> np.ndarray:
        span = self.maxs - self.mins
        degenerate = span == 0
        out = (pts - self.mins) / np.where(degenerate, 1.0, span)
        out[..., degenerate] = 0.5
        return out

    def transform_labels(self, y):
        y = np.asarray(y, dtype=np.float64)
        span = self.label_max - self.label_min
        if span == 0:
            return np.full_like(y, 0.5)
        return (y - self.label_min) / span

    def inverse_labels(self, y_norm):
        y_norm = np.asarray(y_norm, dtype=np.float64)
        span = self.label_max - self.label_min
        if span == 0:
            return np.full_like(y_norm, self.label_min)
        return y_norm * span + self.label_min

    def to_dict(self) -> dict:
        return {
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
            "label_min": self.label_min,
            "label_max": self.label_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormParams":
        return cls(np.array(d["mins"], float), np.array(d["maxs"], float), d.get("label_min"), d.get("label_max"))


def fit_normalizer(train: Sequence[Trajectory]) -> NormParams:
    """Fit min-max ranges over every observed point of the training trajectories.

    Timestamps enter as offsets from each trajectory's first point.
    """
    if len(train) == 0:
        raise DataError("cannot fit normalizer on an empty training set")
    stacked = np.concatenate([tr.offsets() for tr in train])
    labels = [tr.label for tr in train if tr.label is not None]
    return NormParams(
        stacked.min(axis=0),
        stacked.max(axis=0),
        float(min(labels)) if labels else None,
        float(max(labels)) if labels else None,
    )


@dataclass
class TemporalTensor:
    values: np.ndarray  # (N, M_max, F)
    mask: np.ndarray  # (N, M_max) bool, True = observed
    ids: list[str]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def __len__(self):
        return len(self.values)

    def subset(self, idx) -> "TemporalTensor":
        idx = np.asarray(idx)
        return TemporalTensor(self.values[idx], self.mask[idx], [self.ids[i] for i in idx])


def pad_and_mask(trajs: Sequence[Trajectory], norm: NormParams, cap: int = DEFAULT_CAP) -> TemporalTensor:
    """Normalize, truncate to ``cap`` points and mean-pad each trajectory.

    Padding cells hold the trajectory's own per-feature mean over its observed
    (normalized) points, so per-feature means over the full row are unchanged.
    """
    if cap < 1:
        raise DataError("cap must be >= 1")
    n = len(trajs)
    values = np.empty((n, cap, N_FEATURES))
    mask = np.zeros((n, cap), dtype=bool)
    for i, tr in enumerate(trajs):
        x = norm.transform(tr.offsets()[:cap])
        m = len(x)
        values[i, :m] = x
        values[i, m:] = x.mean(axis=0)
        mask[i, :m] = True
    return TemporalTensor(values, mask, [tr.id for tr in trajs])
