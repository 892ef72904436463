"""Fixed-width statistical attribute embedding of variable-length trajectories.

Layout of the 24 columns (``COLUMN_NAMES``):

* mean/var/max/min of TimeDiff, TimeRate, SpeedRate, DirectionAngle (16)
* mean of Speed, DirectionDiff, EventDiff (3)
* LongitudeRange, LatitudeRange, LongitudeCenter, LatitudeCenter (4)
* trajectory length divided by the padding cap (1)

All statistics use raw feature values; variance is the population variance.
Series that are empty for short trajectories contribute zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trajio import DEFAULT_CAP, EVENT, HEADING, LAT, LON, SPEED, T, Trajectory

EPS = 1e-9
DEFAULT_BINS = tuple(range(0, 361, 45))
LAYOUT_VERSION = 1

_STATS = ("mean", "var", "max", "min")
_STAT_SERIES = ("TimeDiff", "TimeRate", "SpeedRate", "DirectionAngle")
_MEAN_SERIES = ("Speed", "DirectionDiff", "EventDiff")
_GEO = ("LongitudeRange", "LatitudeRange", "LongitudeCenter", "LatitudeCenter")

COLUMN_NAMES = tuple(
    [f"{s}_{stat}" for s in _STAT_SERIES for stat in _STATS]
    + [f"{s}_mean" for s in _MEAN_SERIES]
    + list(_GEO)
    + ["Length_frac"]
)
D_ATTR = len(COLUMN_NAMES)
assert D_ATTR == 24


def _guard(x: np.ndarray) -> np.ndarray:
    return np.where(x == 0, EPS, x)


def time_features(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """TimeDiff_i = t_i - t_{i-1}; TimeRate_i = TimeDiff_i / t_{i-1}, i >= 2.

    Raw timestamps are used; a zero previous timestamp divides by ``EPS``.
    """
    t = traj.points[:, T]
    diff = np.diff(t)
    return diff, diff / _guard(t[:-1])


def geo_features(traj: Trajectory) -> tuple[float, float, float, float]:
    lon, lat = traj.points[:, LON], traj.points[:, LAT]
    return (
        float(lon.max() - lon.min()),
        float(lat.max() - lat.min()),
        float(lon.mean()),
        float(lat.mean()),
    )


def speed_features(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Speed series and SpeedRate for i >= 3 (empty below three points)."""
    v = traj.points[:, SPEED]
    dt = np.diff(traj.points[:, T])
    rate = np.diff(v)[1:] / _guard(dt[1:])
    return v.copy(), rate


def direction_features(traj: Trajectory, bins: Sequence[float] = DEFAULT_BINS, wrap: bool = False):
    """Heading differences and discretized heading categories.

    ``bins`` are interval edges; category ``j`` covers ``[bins[j], bins[j+1])``,
    clamped to the first/last interval.  ``wrap`` maps differences into
    ``[-180, 180)`` instead of the plain subtraction.
    """
    edges = np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be strictly increasing with at least two edges")
    theta = traj.points[:, HEADING]
    diff = np.diff(theta)
    if wrap:
        diff = (diff + 180.0) % 360.0 - 180.0
    cats = np.clip(np.searchsorted(edges, theta, side="right") - 1, 0, len(edges) - 2)
    return diff, cats.astype(np.float64)


def event_features(traj: Trajectory) -> np.ndarray:
    return np.diff(traj.points[:, EVENT])


def _stats(x: np.ndarray) -> list[float]:
    if len(x) == 0:
        return [0.0, 0.0, 0.0, 0.0]
    return [float(x.mean()), float(x.var()), float(x.max()), float(x.min())]


def _mean(x: np.ndarray) -> float:
    return float(x.mean()) if len(x) else 0.0


def attribute_vector(traj: Trajectory, cap: int = DEFAULT_CAP, bins=DEFAULT_BINS, wrap: bool = False) -> np.ndarray:
    time_diff, time_rate = time_features(traj)
    speed, speed_rate = speed_features(traj)
    dir_diff, dir_angle = direction_features(traj, bins, wrap)
    event_diff = event_features(traj)
    row = (
        _stats(time_diff)
        + _stats(time_rate)
        + _stats(speed_rate)
        + _stats(dir_angle)
        + [_mean(speed), _mean(dir_diff), _mean(event_diff)]
        + list(geo_features(traj))
        + [min(len(traj), cap) / cap]
    )
    return np.array(row)


@dataclass
class AttributeEmbedding:
    values: np.ndarray  # (N, 24)
    column_names: tuple = COLUMN_NAMES

    def to_csv(self, stream, ids: Sequence[str] | None = None) -> None:
        import csv

        w = csv.writer(stream, lineterminator="\n")
        w.writerow((["traj_id"] if ids is not None else []) + list(self.column_names))
        for i, row in enumerate(self.values):
            w.writerow(([ids[i]] if ids is not None else []) + [repr(float(v)) for v in row])


def attribute_embedding(trajs: Sequence[Trajectory], cap: int = DEFAULT_CAP, bins=DEFAULT_BINS,
                        wrap: bool = False) -> AttributeEmbedding:
    """Stack per-trajectory attribute vectors into an ``N x 24`` matrix."""
    if len(trajs) == 0:
        return AttributeEmbedding(np.zeros((0, D_ATTR)))
    return AttributeEmbedding(np.stack([attribute_vector(tr, cap, bins, wrap) for tr in trajs]))


@dataclass
class AttributeScaler:
    """Column z-scoring fit on the training split; zero-variance columns pass through centered."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "AttributeScaler":
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], float), np.array(d["scale"], float))
