"""Domain types and text file formats for landmark maps and drive sessions.

Maps are line oriented, one landmark per line::

    # id,x,y,class[,persistent]
    3,12.5,-4.25,pole,1

Session files are named ``session_<id>.log`` and hold two record kinds::

    P,t,x,y,heading
    D,pose_index,landmark_id,range,bearing

Pose records are numbered in file order starting at 0.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi

POSE_DTYPE = np.dtype([("t", "f8"), ("x", "f8"), ("y", "f8"), ("heading", "f8")])
EVENT_DTYPE = np.dtype(
    [("pose_index", "i8"), ("landmark_id", "i8"), ("range", "f8"), ("bearing", "f8")]
)

_SESSION_NAME = re.compile(r"^session_(-?\d+)\.log$")


class FormatError(ValueError):
    """A map or session file could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class ValidationError(ValueError):
    """Data parsed fine but violates a domain invariant."""


class DegenerateGeometryError(ValueError):
    """Vehicle and landmark positions coincide."""


class LandmarkClass(str, enum.Enum):
    POLE = "pole"
    CORNER = "corner"


@dataclass(frozen=True)
class Landmark:
    id: int
    x: float
    y: float
    cls: LandmarkClass = LandmarkClass.POLE
    persistent: bool | None = None  # ground truth, simulator maps only

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"landmark {self.id} has non-finite position")
        if not isinstance(self.cls, LandmarkClass):
            object.__setattr__(self, "cls", LandmarkClass(self.cls))


@dataclass(frozen=True)
class FeatureMap:
    """Immutable landmark map, kept sorted by landmark id."""

    landmarks: tuple[Landmark, ...] = ()
    frame_name: str = "map"

    def __post_init__(self):
        ordered = tuple(sorted(self.landmarks, key=lambda lm: lm.id))
        seen = set()
        for lm in ordered:
            if lm.id in seen:
                raise ValidationError(f"duplicate landmark id {lm.id}")
            seen.add(lm.id)
        object.__setattr__(self, "landmarks", ordered)

    def __len__(self) -> int:
        return len(self.landmarks)

    def __iter__(self) -> Iterator[Landmark]:
        return iter(self.landmarks)

    @cached_property
    def ids(self) -> np.ndarray:
        ids = np.array([lm.id for lm in self.landmarks], dtype=np.int64)
        ids.flags.writeable = False
        return ids

    @cached_property
    def xy(self) -> np.ndarray:
        xy = np.array([(lm.x, lm.y) for lm in self.landmarks], dtype=float).reshape(-1, 2)
        xy.flags.writeable = False
        return xy

    @cached_property
    def _index(self) -> dict[int, int]:
        return {lm.id: i for i, lm in enumerate(self.landmarks)}

    def index_of(self, landmark_id: int) -> int:
        try:
            return self._index[int(landmark_id)]
        except KeyError:
            raise ValidationError(f"unknown landmark id {landmark_id}") from None

    def indices_of(self, landmark_ids: np.ndarray) -> np.ndarray:
        """Vectorised ``index_of``; raises on any unknown id."""
        landmark_ids = np.asarray(landmark_ids, dtype=np.int64)
        if len(self) == 0:
            if landmark_ids.size:
                raise ValidationError(f"unknown landmark id {landmark_ids.flat[0]}")
            return np.zeros(0, dtype=np.int64)
        pos = np.searchsorted(self.ids, landmark_ids)
        pos = np.clip(pos, 0, len(self) - 1)
        bad = self.ids[pos] != landmark_ids
        if bad.any():
            raise ValidationError(f"unknown landmark id {landmark_ids[bad][0]}")
        return pos

    def get(self, landmark_id: int) -> Landmark:
        return self.landmarks[self.index_of(landmark_id)]

    def subset(self, landmark_ids: Iterable[int], frame_name: str | None = None) -> FeatureMap:
        keep = {int(i) for i in landmark_ids}
        return FeatureMap(
            tuple(lm for lm in self.landmarks if lm.id in keep),
            frame_name=self.frame_name if frame_name is None else frame_name,
        )


class VehiclePose(NamedTuple):
    t: float
    x: float
    y: float
    heading: float


class DetectionEvent(NamedTuple):
    pose_index: int
    landmark_id: int
    range: float
    bearing_vehicle: float


@dataclass(frozen=True, eq=False)
class SessionLog:
    """One drive: poses and matched-landmark detections, stored column-wise.

    ``poses`` has dtype :data:`POSE_DTYPE` and ``events`` has dtype
    :data:`EVENT_DTYPE`. Both arrays are made read-only on construction.
    """

    session_id: int
    poses: np.ndarray
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=EVENT_DTYPE))

    def __post_init__(self):
        poses = _as_records(self.poses, POSE_DTYPE)
        events = _as_records(self.events, EVENT_DTYPE)
        if poses.size > 1 and not np.all(np.diff(poses["t"]) > 0):
            raise ValidationError(f"session {self.session_id}: pose times not strictly increasing")
        if events.size:
            pi = events["pose_index"]
            bad = (pi < 0) | (pi >= poses.size)
            if bad.any():
                raise ValidationError(
                    f"session {self.session_id}: event pose_index {pi[bad][0]} out of range "
                    f"for {poses.size} poses"
                )
            if np.any(events["range"] < 0):
                raise ValidationError(f"session {self.session_id}: negative detection range")
        poses.flags.writeable = False
        events.flags.writeable = False
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "events", events)

    def __eq__(self, other):
        if not isinstance(other, SessionLog):
            return NotImplemented
        return (
            self.session_id == other.session_id
            and np.array_equal(self.poses, other.poses)
            and np.array_equal(self.events, other.events)
        )

    __hash__ = None

    @property
    def n_poses(self) -> int:
        return int(self.poses.size)

    def pose(self, i: int) -> VehiclePose:
        return VehiclePose(*(float(v) for v in self.poses[i]))

    def iter_poses(self) -> Iterator[VehiclePose]:
        for i in range(self.poses.size):
            yield self.pose(i)

    def iter_events(self) -> Iterator[DetectionEvent]:
        for e in self.events:
            yield DetectionEvent(int(e[0]), int(e[1]), float(e[2]), float(e[3]))

    def pose_xy(self) -> np.ndarray:
        return np.column_stack([self.poses["x"], self.poses["y"]])


def _as_records(data, dtype: np.dtype) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype.names is None and data.size:
        plain = np.asarray(data, dtype=float).reshape(-1, len(dtype.names))
        out = np.empty(plain.shape[0], dtype=dtype)
        for j, name in enumerate(dtype.names):
            out[name] = plain[:, j]
        return out
    if isinstance(data, np.ndarray) and data.size == 0:
        return np.zeros(0, dtype=dtype)
    return np.array(data, dtype=dtype, copy=True).reshape(-1)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + math.pi, TWO_PI) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def landmark_frame_angle(pose, landmark) -> float:
    """Direction from the landmark to the vehicle, in [0, 2*pi).

    This is the angle at which the landmark "sees" the vehicle in its own
    frame; a vehicle due east of the landmark is at angle 0.
    """
    dx = pose.x - landmark.x
    dy = pose.y - landmark.y
    if not all(math.isfinite(v) for v in (pose.x, pose.y, landmark.x, landmark.y)):
        raise ValueError("non-finite position")
    if dx == 0.0 and dy == 0.0:
        raise DegenerateGeometryError(
            f"vehicle at ({pose.x}, {pose.y}) coincides with landmark {getattr(landmark, 'id', '?')}"
        )
    a = math.atan2(dy, dx) % TWO_PI
    # fmod can round a tiny negative angle up to exactly 2*pi
    return 0.0 if a >= TWO_PI else a


def landmark_frame_angles(pose_xy: np.ndarray, landmark_xy: np.ndarray) -> np.ndarray:
    """Vectorised :func:`landmark_frame_angle` over paired rows."""
    d = np.asarray(pose_xy, dtype=float) - np.asarray(landmark_xy, dtype=float)
    if np.any((d[..., 0] == 0.0) & (d[..., 1] == 0.0)):
        raise DegenerateGeometryError("vehicle position coincides with a landmark")
    a = np.mod(np.arctan2(d[..., 1], d[..., 0]), TWO_PI)
    return np.where(a >= TWO_PI, 0.0, a)


# ---------------------------------------------------------------------------
# Map files


def _fmt(v: float) -> str:
    return repr(float(v))


def save_map(fmap: FeatureMap, path) -> None:
    path = Path(path)
    lines = [f"# frame={fmap.frame_name}", "# id,x,y,class[,persistent]"]
    for lm in fmap.landmarks:
        row = f"{lm.id},{_fmt(lm.x)},{_fmt(lm.y)},{lm.cls.value}"
        if lm.persistent is not None:
            row += f",{int(lm.persistent)}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_bool(tok: str) -> bool:
    t = tok.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise ValueError(f"bad boolean {tok!r}")


def load_map(path) -> FeatureMap:
    path = Path(path)
    frame_name = "map"
    landmarks: list[Landmark] = []
    seen: dict[int, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = re.match(r"#\s*frame=(.*)$", line)
                if m:
                    frame_name = m.group(1).strip()
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (4, 5):
                raise FormatError(path, lineno, f"expected 4 or 5 fields, got {len(parts)}")
            try:
                lid = int(parts[0])
                x, y = float(parts[1]), float(parts[2])
                cls = LandmarkClass(parts[3].lower())
                persistent = _parse_bool(parts[4]) if len(parts) == 5 else None
                lm = Landmark(lid, x, y, cls, persistent)
            except ValidationError as exc:
                raise FormatError(path, lineno, str(exc)) from None
            except ValueError as exc:
                raise FormatError(path, lineno, str(exc)) from None
            if lid in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate landmark id {lid} (first on line {seen[lid]})"
                )
            seen[lid] = lineno
            landmarks.append(lm)
    return FeatureMap(tuple(landmarks), frame_name=frame_name)


# ---------------------------------------------------------------------------
# Session files


def session_filename(session_id: int) -> str:
    return f"session_{session_id}.log"


def save_session(session: SessionLog, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / session_filename(session.session_id)
    lines = [f"P,{_fmt(t)},{_fmt(x)},{_fmt(y)},{_fmt(h)}" for t, x, y, h in session.poses.tolist()]
    lines.extend(
        f"D,{pi},{lid},{_fmt(r)},{_fmt(b)}" for pi, lid, r, b in session.events.tolist()
    )
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_session(path, session_id: int | None = None) -> SessionLog:
    path = Path(path)
    if session_id is None:
        m = _SESSION_NAME.match(path.name)
        if not m:
            raise FormatError(path, 0, "session file name must be session_<id>.log")
        session_id = int(m.group(1))
    poses: list[tuple] = []
    events: list[tuple] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            kind = parts[0].strip()
            try:
                if kind == "P":
                    if len(parts) != 5:
                        raise ValueError(f"pose record needs 5 fields, got {len(parts)}")
                    poses.append(tuple(float(p) for p in parts[1:]))
                elif kind == "D":
                    if len(parts) != 5:
                        raise ValueError(f"detection record needs 5 fields, got {len(parts)}")
                    events.append((int(parts[1]), int(parts[2]), float(parts[3]), float(parts[4])))
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except ValueError as exc:
                raise FormatError(path, lineno, str(exc)) from None
    try:
        return SessionLog(
            session_id,
            np.array(poses, dtype=POSE_DTYPE),
            np.array(events, dtype=EVENT_DTYPE),
        )
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def load_sessions(directory, fmap: FeatureMap | None = None) -> list[SessionLog]:
    """Load every ``session_<id>.log`` in a directory, ordered by id.

    When a map is given, every detection must reference one of its landmarks.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"session directory not found: {directory}")
    sessions = []
    for p in directory.iterdir():
        m = _SESSION_NAME.match(p.name)
        if m and p.is_file():
            sessions.append(load_session(p, int(m.group(1))))
    sessions.sort(key=lambda s: s.session_id)
    ids = [s.session_id for s in sessions]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate session ids")
    if fmap is not None:
        for s in sessions:
            check_events_against_map(s, fmap)
    return sessions


def check_events_against_map(session: SessionLog, fmap: FeatureMap) -> None:
    try:
        fmap.indices_of(session.events["landmark_id"])
    except ValidationError as exc:
        raise ValidationError(f"session {session.session_id}: {exc}") from None


def save_sessions(sessions: Iterable[SessionLog], directory) -> None:
    for s in sessions:
        save_session(s, directory)
