"""Navigability raster queries.

Cell lookup is ``col = floor((x - origin_x) / res)`` and, for a y-up grid,
``row = floor((y - origin_y) / res)``. Image-backed maps are y-down: the
origin is the top-left corner and ``row = floor((origin_y - y) / res)``.
Anything outside the raster is non-navigable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trajectory import AgentPose, Point2, Trajectory, from_agent_frame_points

N_BEARINGS = 360
DEFAULT_MAX_RANGE = 10.0


@dataclass(frozen=True, eq=False)
class NavigabilityMap:
    grid: np.ndarray  # (H, W) bool, True = navigable
    origin: Point2
    resolution: float
    y_up: bool = True
    scene_id: str | None = None

    def __post_init__(self):
        g = np.array(self.grid, dtype=bool)
        if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
            raise ValueError(f"grid must be a non-empty 2D array, got shape {g.shape}")
        if not (self.resolution > 0):
            raise ValueError("resolution must be positive")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "origin", Point2(float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @classmethod
    def open_area(cls, width_m: float, height_m: float, origin=(0.0, 0.0), resolution: float = 0.1):
        h = max(1, int(math.ceil(height_m / resolution)))
        w = max(1, int(math.ceil(width_m / resolution)))
        return cls(np.ones((h, w), dtype=bool), Point2(*origin), resolution)

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, cols, inside) for a ``(..., 2)`` array of world points."""
        p = np.asarray(points, dtype=np.float64)
        cols = np.floor((p[..., 0] - self.origin.x) / self.resolution)
        if self.y_up:
            rows = np.floor((p[..., 1] - self.origin.y) / self.resolution)
        else:
            rows = np.floor((self.origin.y - p[..., 1]) / self.resolution)
        h, w = self.grid.shape
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w) & np.isfinite(rows) & np.isfinite(cols)
        return rows, cols, inside

    def navigable(self, points: np.ndarray) -> np.ndarray:
        """Vectorized navigability for a ``(..., 2)`` array."""
        rows, cols, inside = self.cell_index(points)
        out = np.zeros(inside.shape, dtype=bool)
        r = rows[inside].astype(np.intp)
        c = cols[inside].astype(np.intp)
        out[inside] = self.grid[r, c]
        return out


@dataclass(frozen=True, eq=False)
class DistanceArray:
    distances: np.ndarray  # (360,), bearing b degrees counter-clockwise from heading
    max_range: float
    degenerate: bool = False


def is_navigable(nav_map: NavigabilityMap, p) -> bool:
    return bool(nav_map.navigable(np.asarray([p[0], p[1]], dtype=np.float64)))


def trajectory_violates(nav_map: NavigabilityMap, traj: Trajectory | np.ndarray) -> bool:
    pts = traj.points if isinstance(traj, Trajectory) else np.asarray(traj)
    return not bool(np.all(nav_map.navigable(pts)))


def violations(nav_map: NavigabilityMap, trajs: np.ndarray) -> np.ndarray:
    """Per-trajectory violation flags for a ``(..., T, 2)`` stack."""
    return ~np.all(nav_map.navigable(trajs), axis=-1)


def distance_array(
    nav_map: NavigabilityMap, pose: AgentPose, max_range: float = DEFAULT_MAX_RANGE
) -> DistanceArray:
    """Heading-relative obstacle distances, one ray per degree.

    Rays are marched in steps of half a cell; each entry is the first step
    distance that lands in a blocked cell, or ``max_range`` if none does.
    """
    pos = np.array([pose.position.x, pose.position.y])
    if not nav_map.navigable(pos):
        return DistanceArray(np.zeros(N_BEARINGS), max_range, degenerate=True)
    step = nav_map.resolution / 2.0
    n_steps = int(math.ceil(max_range / step))
    radii = step * np.arange(1, n_steps + 1, dtype=np.float64)
    bearings = pose.heading + np.deg2rad(np.arange(N_BEARINGS, dtype=np.float64))
    dirs = np.stack([np.cos(bearings), np.sin(bearings)], axis=-1)  # (360, 2)
    pts = pos + radii[None, :, None] * dirs[:, None, :]  # (360, n_steps, 2)
    blocked = ~nav_map.navigable(pts)
    hit_any = blocked.any(axis=1)
    first = np.argmax(blocked, axis=1)
    dist = np.where(hit_any, radii[first], max_range)
    return DistanceArray(np.minimum(dist, max_range), max_range)


def prelabel_anchor_validity(nav_map: NavigabilityMap, pose: AgentPose, anchors) -> np.ndarray:
    """True for each anchor whose world-frame placement stays navigable."""
    arr = anchors.anchors if hasattr(anchors, "anchors") else np.asarray(anchors)
    world = from_agent_frame_points(arr, pose)
    return ~violations(nav_map, world)
