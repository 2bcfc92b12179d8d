"""Per-landmark predictor variables accumulated over many drive sessions.

Angles are binned at one degree in the landmark's own frame (see
:func:`mapprune.core.landmark_frame_angle`). For each bin we keep whether the
landmark was ever matched from it and the largest vehicle distance seen
there. Track length and detection area are sums over that range vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import (
    FeatureMap,
    SessionLog,
    ValidationError,
    landmark_frame_angle,
    landmark_frame_angles,
)

N_BINS = 360
BIN_WIDTH = math.pi / 180.0
DEFAULT_RADIUS = 30.0

COLUMNS = (
    "n_views",
    "spanned_angle",
    "track_length",
    "detection_area",
    "max_possible_spanned_angle",
    "concentration_ratio",
    "cr_times_views",
)


def angle_bin(angle) -> np.ndarray | int:
    """One-degree bin index of an angle in radians, floor with wraparound."""
    b = np.floor(np.degrees(angle)).astype(np.int64) % N_BINS
    return int(b) if np.ndim(b) == 0 else b


@dataclass(frozen=True)
class PredictorRecord:
    landmark_id: int
    n_views: int = 0
    angle_bins: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS, dtype=bool))
    max_range_per_bin: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS))
    max_possible_spanned_angle: int = 0
    concentration_ratio: float = 1.0

    @property
    def spanned_angle(self) -> int:
        return spanned_angle(self)

    @property
    def track_length(self) -> float:
        return track_length(self)

    @property
    def detection_area(self) -> float:
        return detection_area(self)

    @property
    def cr_times_views(self) -> float:
        return self.concentration_ratio * self.n_views


def accumulate(record: PredictorRecord, pose, landmark, event) -> PredictorRecord:
    """Return ``record`` updated with one matched detection.

    The range stored per bin is the vehicle-to-landmark distance computed
    from the logged pose and the mapped landmark position, not the measured
    range in ``event``.
    """
    if event.landmark_id != landmark.id or record.landmark_id != landmark.id:
        raise ValidationError(
            f"event for landmark {event.landmark_id} applied to record {record.landmark_id}"
        )
    b = angle_bin(landmark_frame_angle(pose, landmark))
    dist = float(np.hypot(pose.x - landmark.x, pose.y - landmark.y))
    bins = record.angle_bins.copy()
    ranges = record.max_range_per_bin.copy()
    bins[b] = True
    ranges[b] = max(ranges[b], dist)
    return replace(record, n_views=record.n_views + 1, angle_bins=bins, max_range_per_bin=ranges)


def spanned_angle(record) -> int:
    return int(np.count_nonzero(record.angle_bins))


def track_length(record) -> float:
    return float(np.dot(record.max_range_per_bin, np.full(N_BINS, BIN_WIDTH)))


def detection_area(record) -> float:
    r = record.max_range_per_bin
    return float(0.5 * np.dot(r * r, np.full(N_BINS, BIN_WIDTH)))


def max_possible_spanned_angle(landmark, all_poses: np.ndarray, radius: float = DEFAULT_RADIUS) -> int:
    """Number of distinct angle bins covered by trajectory poses within ``radius``.

    ``all_poses`` is an (n, 2) array of vehicle positions or a pose record
    array. Poses exactly on the landmark are skipped.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    xy = _xy(all_poses)
    if xy.shape[0] == 0:
        return 0
    d = xy - np.array([landmark.x, landmark.y])
    dist = np.hypot(d[:, 0], d[:, 1])
    near = (dist <= radius) & (dist > 0)
    if not near.any():
        return 0
    ang = landmark_frame_angles(xy[near], np.array([landmark.x, landmark.y]))
    return int(np.unique(angle_bin(ang)).size)


def concentration_ratio(landmark, fmap: FeatureMap, radius: float = DEFAULT_RADIUS) -> float:
    """Largest neighbour distance over the sum of neighbour distances.

    Neighbours are the other landmarks within ``radius``. With no neighbours
    the landmark is treated as maximally isolated and 1.0 is returned.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(fmap) == 0:
        return 1.0
    d = np.hypot(fmap.xy[:, 0] - landmark.x, fmap.xy[:, 1] - landmark.y)
    mask = (d <= radius) & (fmap.ids != landmark.id)
    if not mask.any():
        return 1.0
    dn = d[mask]
    total = dn.sum()
    if total == 0.0:
        return 1.0
    return float(dn.max() / total)


def _xy(poses) -> np.ndarray:
    poses = np.asarray(poses)
    if poses.dtype.names is not None:
        return np.column_stack([poses["x"], poses["y"]]).astype(float)
    return poses.reshape(-1, 2).astype(float)


@dataclass(frozen=True)
class PredictorMatrix:
    landmark_ids: np.ndarray
    values: np.ndarray
    column_names: tuple[str, ...] = COLUMNS

    def __post_init__(self):
        ids = np.asarray(self.landmark_ids, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float).reshape(ids.size, len(self.column_names))
        if not np.all(np.isfinite(vals)):
            raise ValidationError("predictor matrix has missing or non-finite values")
        object.__setattr__(self, "landmark_ids", ids)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def select(self, names: Sequence[str]) -> PredictorMatrix:
        idx = [self.column_names.index(n) for n in names]
        return PredictorMatrix(self.landmark_ids, self.values[:, idx], tuple(names))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(("landmark_id",) + self.column_names) + "\n")
            for lid, row in zip(self.landmark_ids.tolist(), self.values.tolist()):
                fh.write(",".join([str(lid)] + [repr(v) for v in row]) + "\n")

    @classmethod
    def from_csv(cls, path) -> PredictorMatrix:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if not header or header[0] != "landmark_id":
                raise ValidationError(f"{path}: first column must be landmark_id")
            ids, rows = [], []
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != len(header):
                    raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields")
                ids.append(int(parts[0]))
                rows.append([float(p) for p in parts[1:]])
        return cls(np.array(ids, dtype=np.int64), np.array(rows).reshape(len(ids), len(header) - 1),
                   tuple(header[1:]))


@dataclass
class _Accumulators:
    n_views: np.ndarray
    bins: np.ndarray
    ranges: np.ndarray


def _accumulate_sessions(fmap: FeatureMap, sessions: Sequence[SessionLog]) -> _Accumulators:
    n = len(fmap)
    acc = _Accumulators(
        np.zeros(n, dtype=np.int64), np.zeros((n, N_BINS), dtype=bool), np.zeros((n, N_BINS))
    )
    for s in sessions:
        if s.events.size == 0:
            continue
        li = fmap.indices_of(s.events["landmark_id"])
        pidx = s.events["pose_index"]
        pxy = np.column_stack([s.poses["x"][pidx], s.poses["y"][pidx]])
        lxy = fmap.xy[li]
        b = angle_bin(landmark_frame_angles(pxy, lxy))
        dist = np.hypot(pxy[:, 0] - lxy[:, 0], pxy[:, 1] - lxy[:, 1])
        acc.n_views += np.bincount(li, minlength=n)
        acc.bins[li, b] = True
        np.maximum.at(acc.ranges, (li, b), dist)
    return acc


def build_records(
    fmap: FeatureMap, sessions: Sequence[SessionLog], radius: float = DEFAULT_RADIUS
) -> list[PredictorRecord]:
    """Finalised predictor records, one per map landmark in id order."""
    acc = _accumulate_sessions(fmap, sessions)
    pooled = (
        np.concatenate([s.pose_xy() for s in sessions]) if sessions else np.zeros((0, 2))
    )
    records = []
    for i, lm in enumerate(fmap.landmarks):
        records.append(
            PredictorRecord(
                landmark_id=lm.id,
                n_views=int(acc.n_views[i]),
                angle_bins=acc.bins[i].copy(),
                max_range_per_bin=acc.ranges[i].copy(),
                max_possible_spanned_angle=max_possible_spanned_angle(lm, pooled, radius),
                concentration_ratio=concentration_ratio(lm, fmap, radius),
            )
        )
    return records


def build_matrix(
    fmap: FeatureMap, sessions: Sequence[SessionLog], radius: float = DEFAULT_RADIUS
) -> PredictorMatrix:
    """Predictor matrix with one row per map landmark, including undetected ones."""
    if not sessions:
        raise ValueError("at least one session is required")
    records = build_records(fmap, sessions, radius)
    return matrix_from_records(records)


def matrix_from_records(records: Sequence[PredictorRecord]) -> PredictorMatrix:
    rows = [
        (
            r.n_views,
            r.spanned_angle,
            r.track_length,
            r.detection_area,
            r.max_possible_spanned_angle,
            r.concentration_ratio,
            r.cr_times_views,
        )
        for r in records
    ]
    ids = np.array([r.landmark_id for r in records], dtype=np.int64)
    return PredictorMatrix(ids, np.array(rows, dtype=float).reshape(len(records), len(COLUMNS)))
