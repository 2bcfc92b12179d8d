"""Synthetic multi-session drives around a closed loop with planted landmarks.

Persistent landmarks line both sides of the road, with one quadrant of the
map about four times sparser than the others. Ephemeral landmarks sit close
to the kerb like parked vehicles and vanish after a per-landmark number of
sessions. Every random draw comes from a generator derived from the single
master seed, so a config fully determines the dataset.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    EVENT_DTYPE,
    POSE_DTYPE,
    FeatureMap,
    Landmark,
    LandmarkClass,
    SessionLog,
    save_map,
    save_sessions,
    wrap_angle,
)

MIN_SEPARATION = 0.5
SPARSE_QUADRANT = 2  # x < cx, y < cy
SPARSE_WEIGHT = 0.25


class WorldGenerationError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_persistent: int = 200
    n_ephemeral: int = 100
    area: tuple[float, float] = (220.0, 180.0)
    loop_length: float = 500.0
    corner_radius: float = 15.0
    sensor_range: float = 30.0
    detection_prob: float = 0.9
    ephemeral_lifetime: int = 8  # last-present session drawn from 0 .. lifetime-1
    n_sessions: int = 26
    pose_spacing: float = 1.0
    speed: float = 5.0
    trajectory_jitter: float = 0.5
    persistent_offset: tuple[float, float] = (3.0, 20.0)
    ephemeral_offset: tuple[float, float] = (2.0, 5.0)
    range_noise: float = 0.05
    bearing_noise_deg: float = 0.5
    seed: int = 42

    def __post_init__(self):
        if self.n_persistent < 0 or self.n_ephemeral < 0 or self.n_sessions < 0:
            raise ValueError("counts must be non-negative")
        if self.sensor_range <= 0:
            raise ValueError("sensor_range must be positive")
        if not 0.0 <= self.detection_prob <= 1.0:
            raise ValueError("detection_prob must lie in [0, 1]")
        if self.loop_length <= 0 or self.pose_spacing <= 0:
            raise ValueError("loop_length and pose_spacing must be positive")
        if self.ephemeral_lifetime < 1:
            raise ValueError("ephemeral_lifetime must be at least 1 session")

    @classmethod
    def from_mapping(cls, values: dict) -> WorldConfig:
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown world config key {key!r}")
            default = getattr(cls(), key)
            kwargs[key] = _coerce(raw, default)
        return cls(**kwargs)

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(a)) for a in v)
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if isinstance(default, tuple):
        parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    return float(raw)


@dataclass(frozen=True)
class World:
    map: FeatureMap
    ephemeral_schedule: dict[int, int] = field(default_factory=dict)

    def present_mask(self, session_index: int) -> np.ndarray:
        """Which map landmarks (in id order) physically exist in a session."""
        mask = np.ones(len(self.map), dtype=bool)
        for lid, last in self.ephemeral_schedule.items():
            if last < session_index:
                mask[self.map.index_of(lid)] = False
        return mask


# ---------------------------------------------------------------------------
# Nominal loop geometry


@dataclass(frozen=True)
class Loop:
    """Rounded rectangle centred at ``center``, traversed clockwise."""

    center: tuple[float, float]
    straight_x: float
    straight_y: float
    radius: float

    @property
    def length(self) -> float:
        return 2.0 * (self.straight_x + self.straight_y) + 2.0 * math.pi * self.radius

    def point(self, s):
        """Position, unit tangent and left normal at arc length(s) ``s``."""
        s = np.mod(np.asarray(s, dtype=float), self.length)
        a, b, r = self.straight_x, self.straight_y, self.radius
        cx, cy = self.center
        q = 0.5 * math.pi * r
        # segments: top edge (west to east), NE arc, east edge (north to south), SE arc,
        # bottom edge (east to west), SW arc, west edge (south to north), NW arc
        bounds = np.cumsum([0.0, a, q, b, q, a, q, b, q])
        seg = np.clip(np.searchsorted(bounds, s, side="right") - 1, 0, 7)
        u = s - bounds[seg]
        px = np.empty_like(s)
        py = np.empty_like(s)
        hd = np.empty_like(s)
        hx, hy = a / 2.0, b / 2.0
        # straight edges
        for k, (x0, y0, ang) in {
            0: (-hx, hy + r, 0.0),
            2: (hx + r, hy, -math.pi / 2),
            4: (hx, -hy - r, math.pi),
            6: (-hx - r, -hy, math.pi / 2),
        }.items():
            m = seg == k
            px[m] = x0 + u[m] * math.cos(ang)
            py[m] = y0 + u[m] * math.sin(ang)
            hd[m] = ang
        # arcs turning clockwise around the corner centres
        for k, (ox, oy, start) in {
            1: (hx, hy, math.pi / 2),
            3: (hx, -hy, 0.0),
            5: (-hx, -hy, -math.pi / 2),
            7: (-hx, hy, math.pi),
        }.items():
            m = seg == k
            phi = start - u[m] / r
            px[m] = ox + r * np.cos(phi)
            py[m] = oy + r * np.sin(phi)
            hd[m] = phi - math.pi / 2
        tangent = np.stack([np.cos(hd), np.sin(hd)], axis=-1)
        normal = np.stack([-tangent[..., 1], tangent[..., 0]], axis=-1)
        pos = np.stack([px + cx, py + cy], axis=-1)
        return pos, tangent, normal


def make_loop(config: WorldConfig) -> Loop:
    w, h = config.area
    r = config.corner_radius
    straight_total = config.loop_length / 2.0 - math.pi * r
    if straight_total <= 0:
        raise WorldGenerationError("loop_length too short for the corner radius")
    a = straight_total * w / (w + h)
    b = straight_total - a
    margin = max(config.persistent_offset[1], config.ephemeral_offset[1])
    if a + 2 * r + 2 * margin > w or b + 2 * r + 2 * margin > h:
        raise WorldGenerationError("area too small to hold the loop and its roadside band")
    return Loop((w / 2.0, h / 2.0), a, b, r)


def quadrant_of(xy: np.ndarray, config: WorldConfig) -> np.ndarray:
    """Quadrant index 0..3 (NE, NW, SW, SE) relative to the area centre."""
    cx, cy = config.area[0] / 2.0, config.area[1] / 2.0
    east = xy[..., 0] >= cx
    north = xy[..., 1] >= cy
    return np.where(north, np.where(east, 0, 1), np.where(east, 3, 2))


# ---------------------------------------------------------------------------
# World generation


def _allocate(n: int, weights: np.ndarray) -> np.ndarray:
    raw = n * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def _place(rng, loop, config, n, offset, quadrant, placed, max_tries=2000):
    out = []
    lo, hi = offset
    for _ in range(n):
        for _try in range(max_tries):
            s = rng.uniform(0.0, loop.length)
            d = rng.uniform(lo, hi) * rng.choice((-1.0, 1.0))
            pos, _, normal = loop.point(np.array([s]))
            p = pos[0] + d * normal[0]
            if quadrant is not None and quadrant_of(p, config) != quadrant:
                continue
            if placed and np.min(np.hypot(*(np.asarray(placed) - p).T)) < MIN_SEPARATION:
                continue
            break
        else:
            raise WorldGenerationError(
                "area too small for the requested landmark counts at 0.5 m separation"
            )
        placed.append(p)
        out.append(p)
    return out


def _world_rng(config: WorldConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, 0]))


def generate_world(config: WorldConfig = WorldConfig()) -> World:
    rng = _world_rng(config)
    loop = make_loop(config)
    placed: list[np.ndarray] = []

    weights = np.ones(4)
    weights[SPARSE_QUADRANT] = SPARSE_WEIGHT
    persistent_xy = []
    for q, count in enumerate(_allocate(config.n_persistent, weights)):
        persistent_xy += _place(rng, loop, config, count, config.persistent_offset, q, placed)
    ephemeral_xy = _place(rng, loop, config, config.n_ephemeral, config.ephemeral_offset, None, placed)

    n_total = config.n_persistent + config.n_ephemeral
    ids = rng.permutation(n_total)
    lifetime = min(config.ephemeral_lifetime, max(config.n_sessions, 1))
    last = rng.integers(0, lifetime, size=config.n_ephemeral)
    classes = rng.random(n_total) < 0.5

    landmarks = []
    schedule = {}
    for i, p in enumerate(persistent_xy + ephemeral_xy):
        persistent = i < config.n_persistent
        cls = LandmarkClass.POLE if classes[i] else LandmarkClass.CORNER
        lid = int(ids[i])
        landmarks.append(Landmark(lid, float(p[0]), float(p[1]), cls, persistent))
        if not persistent:
            schedule[lid] = int(last[i - config.n_persistent])
    return World(FeatureMap(tuple(landmarks), frame_name="sim"), schedule)


# ---------------------------------------------------------------------------
# Drives


def _session_rng(config: WorldConfig, stream: int, session_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, stream, session_index]))


def nominal_arc_lengths(config: WorldConfig) -> np.ndarray:
    n = max(int(round(config.loop_length / config.pose_spacing)), 1)
    return np.arange(n) * (make_loop(config).length / n)


def lateral_offsets(config: WorldConfig, session_index: int, s: np.ndarray) -> np.ndarray:
    """Smooth closed-loop lateral deviation whose RMS over a full lap is the jitter."""
    if config.trajectory_jitter == 0:
        return np.zeros_like(s)
    rng = _session_rng(config, 1, session_index)
    k = 4
    freqs = rng.choice(np.arange(2, 13), size=k, replace=False)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=k)
    length = make_loop(config).length
    arg = 2.0 * math.pi * np.outer(s / length, freqs) + phases
    return config.trajectory_jitter * math.sqrt(2.0 / k) * np.sin(arg).sum(axis=1)


def generate_trajectory(config: WorldConfig, session_index: int) -> np.ndarray:
    """Pose records (:data:`POSE_DTYPE`) for one lap."""
    loop = make_loop(config)
    s = nominal_arc_lengths(config)
    pos, _, normal = loop.point(s)
    xy = pos + lateral_offsets(config, session_index, s)[:, None] * normal
    nxt = np.roll(xy, -1, axis=0)
    prv = np.roll(xy, 1, axis=0)
    d = nxt - prv
    heading = wrap_angle(np.arctan2(d[:, 1], d[:, 0])) if len(xy) > 1 else np.zeros(len(xy))
    poses = np.empty(len(s), dtype=POSE_DTYPE)
    poses["t"] = s / config.speed
    poses["x"] = xy[:, 0]
    poses["y"] = xy[:, 1]
    poses["heading"] = heading
    return poses


def simulate_session(world: World, config: WorldConfig, session_index: int) -> SessionLog:
    if not 0 <= session_index < config.n_sessions:
        raise ValueError(f"session_index {session_index} outside 0..{config.n_sessions - 1}")
    poses = generate_trajectory(config, session_index)
    fmap = world.map
    if len(fmap) == 0 or len(poses) == 0:
        return SessionLog(session_index, poses)
    rng = _session_rng(config, 2, session_index)
    pxy = np.column_stack([poses["x"], poses["y"]])
    d = fmap.xy[None, :, :] - pxy[:, None, :]
    dist = np.hypot(d[..., 0], d[..., 1])
    present = world.present_mask(session_index)
    visible = (dist <= config.sensor_range) & present[None, :]
    draw = rng.random(visible.shape)
    hit = visible & (draw < config.detection_prob)
    pi, li = np.nonzero(hit)  # row-major: pose order, then landmark id order
    true_range = dist[pi, li]
    true_bearing = np.arctan2(d[pi, li, 1], d[pi, li, 0]) - poses["heading"][pi]
    noise_r = rng.normal(0.0, 1.0, size=pi.size) * config.range_noise
    noise_b = rng.normal(0.0, 1.0, size=pi.size) * math.radians(config.bearing_noise_deg)
    events = np.empty(pi.size, dtype=EVENT_DTYPE)
    events["pose_index"] = pi
    events["landmark_id"] = fmap.ids[li]
    events["range"] = np.maximum(true_range + noise_r, 0.0)
    events["bearing"] = wrap_angle(true_bearing + noise_b)
    return SessionLog(session_index, poses, events)


def simulate_all(world: World, config: WorldConfig) -> list[SessionLog]:
    return [simulate_session(world, config, i) for i in range(config.n_sessions)]


def save_ground_truth(world: World, path) -> None:
    """``landmark_id,persistent,last_session``; persistent landmarks get last_session -1."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("landmark_id,persistent,last_session\n")
        for lm in world.map:
            last = world.ephemeral_schedule.get(lm.id, -1)
            fh.write(f"{lm.id},{int(bool(lm.persistent))},{last}\n")


def write_dataset(world: World, sessions, out_dir, config: WorldConfig | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_map(world.map, out / "map.txt")
    save_sessions(sessions, out / "sessions")
    save_ground_truth(world, out / "ground_truth.csv")
    if config is not None:
        (out / "world.cfg").write_text(config.to_text(), encoding="utf-8")
