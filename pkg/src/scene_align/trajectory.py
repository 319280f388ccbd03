"""Trajectory primitives: agent-centric frames, extrapolation and distance queries.

Trajectories are stored as ``(T, 2)`` float arrays in world meters. Most
functions also have an array form (``*_points``) that works on any
``(..., 2)`` stack so prototype sets can be transformed in one shot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_DT = 0.4


class Point2(NamedTuple):
    x: float
    y: float


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True, eq=False)
class Trajectory:
    points: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if pts.shape[0] < 1:
            raise ValueError("trajectory needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("trajectory points must be finite")
        if not (self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.dt, self.points.tobytes()))

    @property
    def last(self) -> Point2:
        return Point2(float(self.points[-1, 0]), float(self.points[-1, 1]))

    def flatten(self) -> np.ndarray:
        """(x1, y1, ..., xT, yT)."""
        return self.points.reshape(-1).copy()


@dataclass(frozen=True)
class AgentPose:
    position: Point2
    heading: float = 0.0

    def __post_init__(self):
        pos = Point2(float(self.position[0]), float(self.position[1]))
        if not (math.isfinite(pos.x) and math.isfinite(pos.y) and math.isfinite(self.heading)):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))


@dataclass(frozen=True, eq=False)
class Scene:
    """One prediction window: histories, optional futures, and a map reference."""

    agent_ids: list
    histories: list[Trajectory]
    futures: list[Trajectory] | None = None
    map_id: str | None = None
    scene_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.agent_ids) != len(self.histories):
            raise ValueError("one history per agent required")
        if len(set(self.agent_ids)) != len(self.agent_ids):
            raise ValueError("agent ids must be unique")
        if self.histories:
            t_o, dt = len(self.histories[0]), self.histories[0].dt
            if any(len(h) != t_o or h.dt != dt for h in self.histories):
                raise ValueError("all histories must share length and dt")
        if self.futures is not None:
            if len(self.futures) != len(self.agent_ids):
                raise ValueError("one future per agent required")
            if self.futures and any(len(f) != len(self.futures[0]) for f in self.futures):
                raise ValueError("all futures must share length")

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def obs_len(self) -> int:
        return len(self.histories[0]) if self.histories else 0

    @property
    def pred_len(self) -> int:
        return len(self.futures[0]) if self.futures else 0

    def history_array(self) -> np.ndarray:
        return np.stack([h.points for h in self.histories])

    def future_array(self) -> np.ndarray:
        if self.futures is None:
            raise ValueError(f"scene {self.scene_id!r} has no futures")
        return np.stack([f.points for f in self.futures])


def heading_from_history(history: Trajectory) -> tuple[float, bool]:
    """Heading of the most recent motion, plus a degenerate flag.

    Uses the last point and the most recent earlier point that differs from
    it, so a trailing stationary stretch does not zero the heading. Returns
    ``(0.0, True)`` when every point coincides.
    """
    pts = history.points
    if pts.shape[0] < 2:
        raise ValueError("heading needs a history of at least 2 points")
    last = pts[-1]
    for prev in pts[-2::-1]:
        d = last - prev
        if d[0] != 0.0 or d[1] != 0.0:
            return normalize_angle(math.atan2(d[1], d[0])), False
    return 0.0, True


def pose_from_history(history: Trajectory) -> tuple[AgentPose, bool]:
    heading, degenerate = heading_from_history(history)
    return AgentPose(history.last, heading), degenerate


def _rotation(heading: float) -> tuple[float, float]:
    return math.cos(heading), math.sin(heading)


def to_agent_frame_points(points: np.ndarray, pose: AgentPose) -> np.ndarray:
    c, s = _rotation(pose.heading)
    p = np.asarray(points, dtype=np.float64)
    dx = p[..., 0] - pose.position.x
    dy = p[..., 1] - pose.position.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def from_agent_frame_points(points: np.ndarray, pose: AgentPose) -> np.ndarray:
    c, s = _rotation(pose.heading)
    p = np.asarray(points, dtype=np.float64)
    x = c * p[..., 0] - s * p[..., 1] + pose.position.x
    y = s * p[..., 0] + c * p[..., 1] + pose.position.y
    return np.stack([x, y], axis=-1)


def to_agent_frame(traj: Trajectory, pose: AgentPose) -> Trajectory:
    return Trajectory(to_agent_frame_points(traj.points, pose), traj.dt)


def from_agent_frame(traj: Trajectory, pose: AgentPose) -> Trajectory:
    return Trajectory(from_agent_frame_points(traj.points, pose), traj.dt)


def constant_velocity_extrapolate(history: Trajectory, steps: int) -> Trajectory:
    """Continue the mean of the last ``min(3, T_o - 1)`` displacements."""
    pts = history.points
    if pts.shape[0] < 2:
        raise ValueError("extrapolation needs a history of at least 2 points")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = min(3, pts.shape[0] - 1)
    velocity = np.diff(pts[-(n + 1):], axis=0).mean(axis=0)
    k = np.arange(1, steps + 1, dtype=np.float64)[:, None]
    return Trajectory(pts[-1] + k * velocity, history.dt)


def min_pairwise_distance(a: Trajectory | np.ndarray, b: Trajectory | np.ndarray) -> float:
    pa = a.points if isinstance(a, Trajectory) else np.asarray(a, dtype=np.float64)
    pb = b.points if isinstance(b, Trajectory) else np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise ValueError(f"trajectory length mismatch: {pa.shape} vs {pb.shape}")
    d = pa - pb
    # same arithmetic as cross_min_distances so thresholds agree bit-for-bit
    return float(np.sqrt(np.min(np.sum(d * d, axis=-1))))


def cross_min_distances(set_a: np.ndarray, set_b: np.ndarray) -> np.ndarray:
    """Step-aligned minimum distance for every pair of trajectories.

    ``set_a`` is ``(Ka, T, 2)``, ``set_b`` is ``(Kb, T, 2)``; returns ``(Ka, Kb)``.
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"trajectory length mismatch: {a.shape} vs {b.shape}")
    diff = a[:, None, :, :] - b[None, :, :, :]
    return np.sqrt(np.min(np.sum(diff * diff, axis=-1), axis=-1))


def stack_trajectories(trajs: Sequence[Trajectory]) -> np.ndarray:
    return np.stack([t.points for t in trajs])
