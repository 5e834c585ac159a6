"""Ring x sector polar descriptors (ScanContext grids) for lidar and radar."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud3D

LIDAR = "lidar"
RADAR = "radar"
MODALITIES = (LIDAR, RADAR)


@dataclass(frozen=True)
class DescriptorConfig:
    rings: int = 40
    sectors: int = 120
    r_max: float = 80.0

    def __post_init__(self):
        if self.rings < 1 or self.sectors < 1:
            raise ValueError("rings and sectors must be >= 1")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")

    @property
    def ring_width(self) -> float:
        return self.r_max / self.rings

    @property
    def sector_width(self) -> float:
        return 2.0 * math.pi / self.sectors


@dataclass
class RadarPolarScan:
    """Native radar polar image.

    Row ``a`` covers azimuth ``[-pi + a*dth, -pi + (a+1)*dth)`` with
    ``dth = 2*pi/n_azimuth``; column ``r`` covers range
    ``[r*range_resolution, (r+1)*range_resolution)``.
    """

    intensities: np.ndarray
    range_resolution: float

    def __post_init__(self):
        img = np.asarray(self.intensities, dtype=float)
        if img.ndim != 2 or min(img.shape) < 1:
            raise ValueError(f"radar intensities must be a non-empty 2-D array, got {img.shape}")
        if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
            raise ValueError("radar intensities must lie in [0, 1]")
        if not self.range_resolution > 0:
            raise ValueError("range resolution must be positive")
        self.intensities = img

    @property
    def n_azimuth(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_range(self) -> int:
        return self.intensities.shape[1]

    @property
    def max_range(self) -> float:
        return self.n_range * self.range_resolution


@dataclass
class PolarDescriptor:
    values: np.ndarray
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("descriptor values must be 2-D")
        self.values = v

    @property
    def rings(self) -> int:
        return self.values.shape[0]

    @property
    def sectors(self) -> int:
        return self.values.shape[1]

    def shifted(self, k: int) -> "PolarDescriptor":
        """Columns rolled by ``k`` sectors, i.e. the scene rotated by ``k`` sector widths CCW."""
        return PolarDescriptor(np.roll(self.values, k, axis=1), self.modality)


def polar_bins(x: np.ndarray, y: np.ndarray, cfg: DescriptorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Ring and sector indices of planar points; points at range >= r_max get ring -1."""
    r = np.hypot(x, y)
    ring = np.floor(r / cfg.ring_width).astype(np.int64)
    ring[(r >= cfg.r_max) | (ring >= cfg.rings)] = -1
    az = np.arctan2(y, x)
    sector = np.floor((az + math.pi) / cfg.sector_width).astype(np.int64) % cfg.sectors
    return ring, sector


def lidar_descriptor(cloud: PointCloud3D | np.ndarray, cfg: DescriptorConfig = DescriptorConfig()) -> PolarDescriptor:
    """Binary occupancy: 1 wherever at least one point lands in the cell."""
    pts = cloud.points if isinstance(cloud, PointCloud3D) else np.asarray(cloud, dtype=float)
    out = np.zeros((cfg.rings, cfg.sectors))
    if len(pts):
        ring, sector = polar_bins(pts[:, 0], pts[:, 1], cfg)
        ok = ring >= 0
        out[ring[ok], sector[ok]] = 1.0
    return PolarDescriptor(out, LIDAR)


def radar_descriptor(scan: RadarPolarScan, cfg: DescriptorConfig = DescriptorConfig()) -> PolarDescriptor:
    """Max-pool native radar bins into descriptor cells by bin-center position."""
    if scan.max_range < cfg.r_max:
        raise ValueError(
            f"radar scan covers {scan.max_range:g} m, less than descriptor range {cfg.r_max:g} m"
        )
    n_az, n_r = scan.intensities.shape
    # bin centers in units of descriptor cells
    sector = np.floor((np.arange(n_az) + 0.5) * cfg.sectors / n_az).astype(np.int64) % cfg.sectors
    centers = (np.arange(n_r) + 0.5) * scan.range_resolution
    ring = np.floor(centers / cfg.ring_width).astype(np.int64)
    valid_r = (centers < cfg.r_max) & (ring < cfg.rings)
    img = scan.intensities[:, valid_r]
    ring = ring[valid_r]

    out = np.zeros((cfg.rings, cfg.sectors))
    rr = np.broadcast_to(ring[None, :], img.shape).ravel()
    ss = np.broadcast_to(sector[:, None], img.shape).ravel()
    np.maximum.at(out, (rr, ss), img.ravel())
    return PolarDescriptor(out, RADAR)


def ring_key(values: np.ndarray) -> np.ndarray:
    """Rotation-invariant per-ring summary (row means)."""
    return np.asarray(values, dtype=float).mean(axis=-1)
