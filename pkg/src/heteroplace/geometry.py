"""Planar poses, trajectories and lidar submap accumulation.

Submap boundaries come from a greedy walk away from the center pose that stops
at the first pose violating either the travelled-distance bound or the heading
bound.  Accumulated clouds are expressed in the center pose's frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    w = np.remainder(np.asarray(a, dtype=float) + math.pi, TWO_PI) - math.pi
    w = np.where(w <= -math.pi, w + TWO_PI, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def angular_difference(a, b):
    """Absolute wrapped difference between two headings, in [0, pi]."""
    return np.abs(wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


@dataclass(frozen=True)
class Pose2D:
    t: float
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError("pose timestamp must be finite")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


class Trajectory:
    """Ordered planar poses of one session, stored column-wise."""

    def __init__(self, t, x, y, yaw, session_id: str = ""):
        self.t = np.asarray(t, dtype=float).reshape(-1)
        self.x = np.asarray(x, dtype=float).reshape(-1)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.yaw = np.asarray(wrap_angle(np.asarray(yaw, dtype=float)), dtype=float).reshape(-1)
        self.session_id = session_id
        n = len(self.t)
        if n < 1:
            raise ValueError("trajectory needs at least one pose")
        if not (len(self.x) == len(self.y) == len(self.yaw) == n):
            raise ValueError("trajectory columns differ in length")
        if not np.all(np.isfinite(self.t)):
            raise ValueError("timestamps must be finite")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("timestamps must be strictly increasing")

    @classmethod
    def from_poses(cls, poses: Sequence[Pose2D], session_id: str = "") -> "Trajectory":
        arr = np.array([[p.t, p.x, p.y, p.yaw] for p in poses], dtype=float).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], session_id)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Trajectory(self.t[i], self.x[i], self.y[i], self.yaw[i], self.session_id)
        return Pose2D(float(self.t[i]), float(self.x[i]), float(self.y[i]), float(self.yaw[i]))

    @property
    def poses(self) -> list[Pose2D]:
        return [self[i] for i in range(len(self))]

    @property
    def xy(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.session_id == other.session_id
            and all(np.array_equal(a, b) for a, b in zip(self._cols(), other._cols()))
        )

    def _cols(self):
        return (self.t, self.x, self.y, self.yaw)

    def __repr__(self):
        return f"Trajectory(session_id={self.session_id!r}, n={len(self)})"


@dataclass(frozen=True)
class SubmapConfig:
    r_max: float = 80.0
    theta_max: float = math.pi / 2

    def __post_init__(self):
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")
        if not 0 < self.theta_max <= math.pi:
            raise ValueError("theta_max must lie in (0, pi]")


@dataclass(frozen=True)
class SubmapBounds:
    start_index: int
    center_index: int
    end_index: int

    def __post_init__(self):
        if not self.start_index <= self.center_index <= self.end_index:
            raise ValueError(f"inconsistent submap bounds {self}")

    def __len__(self):
        return self.end_index - self.start_index + 1


@dataclass
class PointCloud3D:
    """Points as an (n, 3) float array, expressed in the frame of ``frame``."""

    points: np.ndarray
    frame: Pose2D | None = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    def __len__(self):
        return len(self.points)


def _within_limits(traj: Trajectory, center: int, idx: np.ndarray, cfg: SubmapConfig) -> np.ndarray:
    d = np.hypot(traj.x[idx] - traj.x[center], traj.y[idx] - traj.y[center])
    ang = angular_difference(traj.yaw[center], traj.yaw[idx])
    return (d <= cfg.r_max) & (ang <= cfg.theta_max)


def _check_index(traj: Trajectory, center) -> int:
    if isinstance(center, (bool, np.bool_)) or not isinstance(center, (int, np.integer)):
        raise TypeError(f"center index must be an integer, got {center!r}")
    if not 0 <= center < len(traj):
        raise IndexError(f"center index {center} outside trajectory of length {len(traj)}")
    return int(center)


def search_backward_bound(traj: Trajectory, center: int, cfg: SubmapConfig = SubmapConfig()) -> int:
    """Walk back from ``center`` and return the last index before the first violation."""
    center = _check_index(traj, center)
    if center == 0:
        return 0
    idx = np.arange(center - 1, -1, -1)
    bad = np.flatnonzero(~_within_limits(traj, center, idx, cfg))
    if bad.size == 0:
        return 0
    return int(idx[bad[0]]) + 1


def search_forward_bound(traj: Trajectory, center: int, cfg: SubmapConfig = SubmapConfig()) -> int:
    """Mirror of :func:`search_backward_bound` toward increasing indices."""
    center = _check_index(traj, center)
    last = len(traj) - 1
    if center == last:
        return last
    idx = np.arange(center + 1, last + 1)
    bad = np.flatnonzero(~_within_limits(traj, center, idx, cfg))
    if bad.size == 0:
        return last
    return int(idx[bad[0]]) - 1


def submap_bounds(traj: Trajectory, center: int, cfg: SubmapConfig = SubmapConfig()) -> SubmapBounds:
    return SubmapBounds(
        search_backward_bound(traj, center, cfg),
        int(center),
        search_forward_bound(traj, center, cfg),
    )


def _rigid(points: np.ndarray, sx, sy, syaw, dx: float, dy: float, dyaw: float) -> np.ndarray:
    # world = R(syaw) p + s ;  out = R(-dyaw) (world - d)
    cs, ss = np.cos(syaw), np.sin(syaw)
    wx = cs * points[:, 0] - ss * points[:, 1] + (sx - dx)
    wy = ss * points[:, 0] + cs * points[:, 1] + (sy - dy)
    cd, sd = math.cos(dyaw), math.sin(dyaw)
    out = np.empty_like(points)
    out[:, 0] = cd * wx + sd * wy
    out[:, 1] = -sd * wx + cd * wy
    out[:, 2] = points[:, 2]
    return out


def transform_points(points: np.ndarray, src: Pose2D | tuple, dst: Pose2D | tuple) -> np.ndarray:
    """Re-express points given in pose ``src``'s frame in pose ``dst``'s frame (z untouched)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return _rigid(points, *_xyyaw(src), *_xyyaw(dst))


def _xyyaw(p) -> tuple[float, float, float]:
    if isinstance(p, Pose2D):
        return p.x, p.y, p.yaw
    x, y, yaw = p
    return float(x), float(y), float(yaw)


def build_submap(
    traj: Trajectory,
    clouds: Sequence[PointCloud3D],
    bounds: SubmapBounds,
    z_band: tuple[float, float] = (-1.0, 3.0),
    r_max: float = 80.0,
) -> PointCloud3D:
    """Accumulate the clouds of ``bounds`` into the center pose frame.

    ``clouds[k]`` belongs to trajectory index ``bounds.start_index + k`` and is
    expressed in that pose's frame.  Points outside ``z_band`` or farther than
    ``r_max`` (planar) from the center are dropped.
    """
    if len(clouds) != len(bounds):
        raise ValueError(f"expected {len(bounds)} clouds for bounds {bounds}, got {len(clouds)}")
    if bounds.end_index >= len(traj) or bounds.start_index < 0:
        raise IndexError(f"bounds {bounds} outside trajectory of length {len(traj)}")
    center = traj[bounds.center_index]
    counts = [len(c) for c in clouds]
    pts = np.concatenate([c.points for c in clouds], axis=0) if clouds else np.zeros((0, 3))
    src = np.repeat(np.arange(bounds.start_index, bounds.end_index + 1), counts)
    pts = _rigid(pts, traj.x[src], traj.y[src], traj.yaw[src], center.x, center.y, center.yaw)
    keep = (pts[:, 2] >= z_band[0]) & (pts[:, 2] <= z_band[1])
    keep &= np.hypot(pts[:, 0], pts[:, 1]) <= r_max
    return PointCloud3D(pts[keep], frame=center)
