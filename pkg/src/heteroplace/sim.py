"""Deterministic 2-D world with a revisiting trajectory and two range sensors.

The world is a square of wall segments and reflective poles.  The lidar is a
clean 360-beam range finder; the radar sees the same geometry with coarser
azimuth bins, reflectivity-weighted returns smeared over neighbouring range
bins, multiplicative speckle, ghost echoes at twice the range and occasional
saturation streaks along one azimuth.

Per-pose sensor noise comes from a counter-based generator keyed on
``(seed, pose index, sensor)`` so renders do not depend on call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .descriptor import RadarPolarScan
from .geometry import PointCloud3D, Pose2D, Trajectory, wrap_angle

LIDAR_SENSOR = 1
RADAR_SENSOR = 2


@dataclass(frozen=True)
class WorldConfig:
    extent: float = 400.0
    wall_count: int = 60
    pole_count: int = 200
    reflectivity: tuple[float, float] = (0.3, 1.0)
    wall_length: tuple[float, float] = (8.0, 40.0)
    pole_radius: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.wall_count < 0 or self.pole_count < 0:
            raise ValueError("primitive counts must be >= 0")
        if self.pole_radius <= 0 or 2 * self.pole_radius >= self.extent:
            raise ValueError("pole_radius must be positive and fit inside the world")


@dataclass(frozen=True)
class SensorConfig:
    lidar_beams: int = 360
    lidar_range_noise: float = 0.02
    lidar_z_levels: tuple[float, ...] = (-0.5, 0.0, 0.5, 1.0)
    lidar_max_range: float = 80.0
    radar_azimuth_bins: int = 120
    radar_range_bins: int = 200
    radar_range_resolution: float = 0.5
    radar_subrays: int = 3
    radar_spread: float = 0.45  # std of the range smear, in bins
    radar_falloff: float = 25.0  # return strength halves at this range, metres
    radar_falloff_floor: float = 0.35  # weakest surface (0.3) stays above a 0.1 threshold
    speckle_sigma: float = 0.05
    streak_probability: float = 0.1
    ghost_probability: float = 0.02

    def __post_init__(self):
        for name in ("lidar_beams", "radar_azimuth_bins", "radar_range_bins", "radar_subrays"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.radar_falloff < 0:
            raise ValueError("radar_falloff must be >= 0 (0 disables it)")
        if not 0.0 <= self.radar_falloff_floor <= 1.0:
            raise ValueError("radar_falloff_floor must be in [0, 1]")
        if not self.lidar_z_levels:
            raise ValueError("need at least one lidar z level")
        for name in ("streak_probability", "ghost_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    def noiseless(self) -> "SensorConfig":
        return replace(self, lidar_range_noise=0.0, speckle_sigma=0.0, streak_probability=0.0, ghost_probability=0.0)


@dataclass
class World:
    extent: float
    walls: np.ndarray  # (n, 2, 2) segment endpoints
    wall_reflectivity: np.ndarray
    poles: np.ndarray  # (m, 2) centres
    pole_radius: np.ndarray
    pole_reflectivity: np.ndarray

    @classmethod
    def empty(cls, extent: float = 400.0) -> "World":
        return cls(extent, np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros(0), np.zeros(0))

    def __eq__(self, other):
        if not isinstance(other, World):
            return NotImplemented
        return self.extent == other.extent and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("walls", "wall_reflectivity", "poles", "pole_radius", "pole_reflectivity")
        )


def generate_world(cfg: WorldConfig = WorldConfig()) -> World:
    rng = np.random.default_rng([cfg.seed, 0x57])
    lo_r, hi_r = cfg.reflectivity
    walls = np.zeros((cfg.wall_count, 2, 2))
    for i in range(cfg.wall_count):
        while True:
            c = rng.uniform(0.0, cfg.extent, size=2)
            ang = rng.uniform(0.0, math.pi)
            half = 0.5 * rng.uniform(*cfg.wall_length)
            d = half * np.array([math.cos(ang), math.sin(ang)])
            seg = np.stack([c - d, c + d])
            if np.all(seg >= 0.0) and np.all(seg <= cfg.extent):
                walls[i] = seg
                break
    wall_refl = rng.uniform(lo_r, hi_r, size=cfg.wall_count)
    r = cfg.pole_radius
    poles = rng.uniform(r, cfg.extent - r, size=(cfg.pole_count, 2))
    pole_refl = rng.uniform(lo_r, hi_r, size=cfg.pole_count)
    return World(cfg.extent, walls, wall_refl, poles, np.full(cfg.pole_count, r), pole_refl)


# ---------------------------------------------------------------- ray casting


def cast_rays(world: World, origin, angles: np.ndarray):
    """Nearest hit along each world-frame ray.  Returns (ranges, reflectivity); inf where nothing is hit."""
    ox, oy = float(origin[0]), float(origin[1])
    angles = np.asarray(angles, dtype=float)
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    best = np.full(angles.shape, np.inf)
    refl = np.zeros(angles.shape)

    if len(world.walls):
        a = world.walls[:, 0]
        e = world.walls[:, 1] - a
        ex, ey = e[None, :, 0], e[None, :, 1]
        wx, wy = a[None, :, 0] - ox, a[None, :, 1] - oy
        denom = dx * ey - dy * ex
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (wx * ey - wy * ex) / denom
            u = (wx * dy - wy * dx) / denom
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
        t = np.where(hit, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(len(angles)), k]
        closer = tk < best
        best = np.where(closer, tk, best)
        refl = np.where(closer, world.wall_reflectivity[k], refl)

    if len(world.poles):
        cx = world.poles[None, :, 0] - ox
        cy = world.poles[None, :, 1] - oy
        proj = cx * dx + cy * dy
        perp2 = cx * cx + cy * cy - proj * proj
        r2 = world.pole_radius[None, :] ** 2
        inside = cx * cx + cy * cy <= r2
        disc = r2 - perp2
        with np.errstate(invalid="ignore"):
            t = proj - np.sqrt(disc)
        hit = (disc >= 0.0) & (t > 1e-9) & ~inside
        t = np.where(hit, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(len(angles)), k]
        closer = tk < best
        best = np.where(closer, tk, best)
        refl = np.where(closer, world.pole_reflectivity[k], refl)
    return best, refl


def clearance(world: World, pts: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest primitive surface."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    out = np.full(len(pts), np.inf)
    if len(world.walls):
        a = world.walls[None, :, 0]
        e = world.walls[None, :, 1] - a
        rel = pts[:, None] - a
        u = np.clip(np.sum(rel * e, axis=-1) / np.maximum(np.sum(e * e, axis=-1), 1e-12), 0, 1)
        d = np.linalg.norm(rel - u[..., None] * e, axis=-1)
        out = np.minimum(out, d.min(axis=1))
    if len(world.poles):
        d = np.linalg.norm(pts[:, None] - world.poles[None], axis=-1) - world.pole_radius[None]
        out = np.minimum(out, d.min(axis=1))
    return out


# ---------------------------------------------------------------- trajectory


def _closed_curve(rng, n=4096):
    """Random star-shaped unit loop r(phi) = 1 + sum a_k cos(k phi + p_k)."""
    phi = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    r = np.ones(n)
    for k in (2, 3, 4):
        r += rng.uniform(0.0, 0.12) / k * np.cos(k * phi + rng.uniform(0, 2 * math.pi))
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1), float(r.max())


def _arc_sample(curve: np.ndarray, s: np.ndarray):
    """Positions and unit tangents at arc lengths ``s`` along a closed polyline."""
    nxt = np.roll(curve, -1, axis=0)
    seg = np.linalg.norm(nxt - curve, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.mod(s, total)
    i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(curve) - 1)
    f = (s - cum[i]) / seg[i]
    pos = curve[i] + f[:, None] * (nxt[i] - curve[i])
    # tangent from a centred difference over neighbouring vertices
    tan = np.roll(curve, -1, axis=0)[i] - np.roll(curve, 1, axis=0)[i]
    tan2 = np.roll(curve, -2, axis=0)[i] - curve[i]
    tan = (1 - f)[:, None] * tan + f[:, None] * tan2
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    return pos, tan


_CHECK_STEP = 0.25  # metres between clearance samples along a candidate route


def _clear_run(ok: np.ndarray, length: int) -> int | None:
    """Start of the first cyclic run of ``length`` True samples, or None."""
    if ok.all():
        return 0
    if length > len(ok):
        return None
    twice = np.concatenate([ok, ok]).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(twice)])
    hits = np.flatnonzero(csum[length : length + len(ok)] - csum[: len(ok)] == length)
    return int(hits[0]) if len(hits) else None


def generate_trajectory(
    world: World,
    pose_count: int,
    revisit_fraction: float,
    seed: int,
    spacing: float = 0.45,
    clearance_m: float = 2.0,
    heading_segment: int = 100,
    lateral_offset: float = 1.0,
    drive: int = 0,
    max_attempts: int = 5000,
) -> Trajectory:
    """Loop-shaped route; the final ``revisit_fraction`` of poses drives it again.

    Revisiting poses are offset sideways by up to ``lateral_offset`` metres and
    their headings are rotated by an independent uniform angle per block of
    ``heading_segment`` poses.  Without revisits the route is left open so it
    never returns near its start; it begins at the first point from which the
    whole drive stays clear of obstacles, the same for every drive.

    The route geometry depends only on ``seed`` and the route length; ``drive``
    selects an independent traversal of it (start point, lateral offsets and
    heading perturbations), like another day on the same roads.
    """
    if pose_count < 2:
        raise ValueError("pose_count must be >= 2")
    if not 0.0 <= revisit_fraction < 1.0:
        raise ValueError("revisit_fraction must lie in [0, 1)")
    if not 0 < spacing <= 0.5:
        raise ValueError("spacing must lie in (0, 0.5] m")
    rng = np.random.default_rng([seed, 0x7A])
    n_rev = int(round(revisit_fraction * pose_count))
    n_first = pose_count - n_rev
    perimeter = n_first * spacing if n_rev > 0 else n_first * spacing / 0.8

    for _ in range(max_attempts):
        unit, r_out = _closed_curve(rng)
        unit_len = np.sum(np.linalg.norm(np.roll(unit, -1, axis=0) - unit, axis=1))
        scale = perimeter / unit_len
        margin = scale * r_out + clearance_m + 1.0
        if 2 * margin >= world.extent:
            raise ValueError("world too small for the requested route length")
        center = rng.uniform(margin, world.extent - margin, size=2)
        if rng.random() < 0.5:
            unit = unit[::-1].copy()
        curve = center + scale * unit
        arc = np.arange(0.0, perimeter, _CHECK_STEP)
        need = len(arc) if n_rev else math.ceil(n_first * spacing / _CHECK_STEP) + 2
        # every 8th sample first: a run of clear fine samples implies one among the coarse ones
        coarse = clearance(world, _arc_sample(curve, arc[::8])[0]) >= clearance_m + lateral_offset
        if _clear_run(coarse, need // 8 if n_rev == 0 else len(coarse)) is None:
            continue
        clear = clearance(world, _arc_sample(curve, arc)[0]) >= clearance_m + lateral_offset
        start = _clear_run(clear, need)
        if start is not None:
            break
    else:
        raise RuntimeError("could not place a collision-free route in this world")

    rng = np.random.default_rng([seed, 0x7B, drive])
    # a loop may start anywhere; an open route starts where its clear stretch begins
    s0 = rng.uniform(0.0, perimeter) if n_rev else arc[start]
    s = s0 + spacing * np.arange(pose_count)
    pos, tan = _arc_sample(curve, s)
    yaw = np.arctan2(tan[:, 1], tan[:, 0])
    if n_rev:
        j = np.arange(n_rev)
        normal = np.stack([-tan[n_first:, 1], tan[n_first:, 0]], axis=1)
        # starts at zero so the route stays continuous where the revisit begins
        lat = lateral_offset * np.sin(2 * math.pi * j / rng.uniform(100.0, 200.0))
        pos[n_first:] += lat[:, None] * normal
        offsets = rng.uniform(-math.pi, math.pi, size=(n_rev + heading_segment - 1) // heading_segment)
        yaw[n_first:] += offsets[j // heading_segment]
    t = 0.1 * np.arange(pose_count)
    return Trajectory(t, pos[:, 0], pos[:, 1], wrap_angle(yaw), session_id=f"sim-{seed}-{drive}")


# ---------------------------------------------------------------- sensors


def sensor_rng(seed: int, pose_index: int, sensor: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, ((pose_index & 0xFFFFFFFFFFFF) << 8) | sensor], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _pose_tuple(pose):
    if isinstance(pose, Pose2D):
        return pose.x, pose.y, pose.yaw
    return tuple(float(v) for v in pose)


def render_lidar(world: World, pose, cfg: SensorConfig, rng: np.random.Generator) -> PointCloud3D:
    """Sensor-frame points: one return per beam and fan level, none beyond the max range."""
    x, y, yaw = _pose_tuple(pose)
    local = -math.pi + 2 * math.pi * np.arange(cfg.lidar_beams) / cfg.lidar_beams
    ranges, _ = cast_rays(world, (x, y), local + yaw)
    z = np.asarray(cfg.lidar_z_levels, dtype=float)
    rho = np.repeat(ranges[:, None], len(z), axis=1)
    if cfg.lidar_range_noise > 0:
        rho = rho + cfg.lidar_range_noise * rng.standard_normal(rho.shape)
    ok = np.isfinite(rho) & (rho > 0) & (rho <= cfg.lidar_max_range)
    ang = np.repeat(local[:, None], len(z), axis=1)
    zz = np.broadcast_to(z[None, :], rho.shape)
    pts = np.stack([rho[ok] * np.cos(ang[ok]), rho[ok] * np.sin(ang[ok]), zz[ok]], axis=1)
    frame = pose if isinstance(pose, Pose2D) else None
    return PointCloud3D(pts, frame=frame)


def render_radar(world: World, pose, cfg: SensorConfig, rng: np.random.Generator) -> RadarPolarScan:
    x, y, yaw = _pose_tuple(pose)
    n_az, n_r, res = cfg.radar_azimuth_bins, cfg.radar_range_bins, cfg.radar_range_resolution
    sub = cfg.radar_subrays
    frac = (np.arange(n_az)[:, None] + np.arange(sub)[None, :] / sub).ravel()
    local = -math.pi + 2 * math.pi * frac / n_az
    ranges, refl = cast_rays(world, (x, y), local + yaw)
    row = np.repeat(np.arange(n_az), sub)

    img = np.zeros((n_az, n_r))
    hit = np.isfinite(ranges) & (ranges < n_r * res)
    rows, bins = row[hit], np.floor(ranges[hit] / res).astype(np.int64)
    amp = refl[hit]
    if cfg.radar_falloff > 0:
        amp = amp * np.maximum(1.0 / (1.0 + ranges[hit] / cfg.radar_falloff), cfg.radar_falloff_floor)
    for k in (-1, 0, 1):
        w = math.exp(-0.5 * (k / cfg.radar_spread) ** 2) if cfg.radar_spread > 0 else float(k == 0)
        b = bins + k
        ok = (b >= 0) & (b < n_r)
        np.maximum.at(img, (rows[ok], b[ok]), amp[ok] * w)

    if cfg.ghost_probability > 0:
        ghost = rng.random(len(rows)) < cfg.ghost_probability
        gb = np.floor(2.0 * ranges[hit] / res).astype(np.int64)
        ok = ghost & (gb < n_r)
        np.maximum.at(img, (rows[ok], gb[ok]), 0.5 * amp[ok])
    if cfg.speckle_sigma > 0:
        img *= 1.0 + cfg.speckle_sigma * rng.standard_normal(img.shape)
    if cfg.streak_probability > 0 and rng.random() < cfg.streak_probability:
        a = int(rng.integers(n_az))
        img[a] = np.maximum(img[a], rng.uniform(0.8, 1.0, size=n_r))
    return RadarPolarScan(np.clip(img, 0.0, 1.0), res)
