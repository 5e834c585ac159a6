"""End-to-end experiment: simulate sessions, build descriptors, train, and score retrieval."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import evaluation, retrieval, sim
from .descriptor import LIDAR, RADAR, DescriptorConfig, lidar_descriptor, radar_descriptor
from .geometry import SubmapBounds, SubmapConfig, Trajectory, build_submap, submap_bounds
from .training import EmbeddingModel, LocationSet

COMBOS = {"L2L": (LIDAR, LIDAR), "R2L": (RADAR, LIDAR), "R2R": (RADAR, RADAR), "L2R": (LIDAR, RADAR)}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    pose_count: int = 900
    map_count: int = 600
    revisit_fraction: float = 1.0 / 3.0
    world: sim.WorldConfig = field(default_factory=sim.WorldConfig)
    sensors: sim.SensorConfig = field(default_factory=sim.SensorConfig)
    submap: SubmapConfig = field(default_factory=SubmapConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)

    def __post_init__(self):
        if not 0 < self.map_count < self.pose_count:
            raise ValueError("map_count must leave at least one query pose")


@dataclass
class SessionData:
    trajectory: Trajectory
    bounds: list[SubmapBounds]
    lidar: np.ndarray  # (n, rings, sectors) submap descriptors
    radar: np.ndarray  # (n, rings, sectors) single-scan descriptors

    def locations(self) -> LocationSet:
        return LocationSet(self.trajectory.xy, self.lidar, self.radar)

    def maps(self, modality: str) -> np.ndarray:
        return self.lidar if modality == LIDAR else self.radar


@dataclass
class Experiment:
    world: sim.World
    train: SessionData
    map: SessionData
    query: SessionData


def render_session(world: sim.World, traj: Trajectory, sensors: sim.SensorConfig, seed: int, index_offset: int = 0):
    """Lidar clouds and radar scans for every pose; noise is keyed on ``index_offset + i``."""
    clouds, scans = [], []
    for i in range(len(traj)):
        pose = traj[i]
        k = index_offset + i
        clouds.append(sim.render_lidar(world, pose, sensors, sim.sensor_rng(seed, k, sim.LIDAR_SENSOR)))
        scans.append(sim.render_radar(world, pose, sensors, sim.sensor_rng(seed, k, sim.RADAR_SENSOR)))
    return clouds, scans


def all_bounds(traj: Trajectory, cfg: SubmapConfig = SubmapConfig()) -> list[SubmapBounds]:
    return [submap_bounds(traj, i, cfg) for i in range(len(traj))]


def describe_session(traj: Trajectory, clouds, scans, submap_cfg=SubmapConfig(), desc_cfg=DescriptorConfig()) -> SessionData:
    bounds = all_bounds(traj, submap_cfg)
    lidar, radar = [], []
    for b, scan in zip(bounds, scans):
        cloud = build_submap(traj, clouds[b.start_index : b.end_index + 1], b, r_max=desc_cfg.r_max)
        lidar.append(lidar_descriptor(cloud, desc_cfg).values)
        radar.append(radar_descriptor(scan, desc_cfg).values)
    return SessionData(traj, bounds, np.array(lidar), np.array(radar))


def simulate_trajectories(cfg: ExperimentConfig):
    """World plus (train, map, query) trajectories on one route.

    Map and query split the first drive; training uses a second drive.
    """
    world = sim.generate_world(cfg.world)
    route = sim.generate_trajectory(world, cfg.pose_count, cfg.revisit_fraction, cfg.seed)
    route_map = route[: cfg.map_count]
    route_query = route[cfg.map_count :]
    route_map.session_id, route_query.session_id = "map", "query"
    train = sim.generate_trajectory(world, cfg.pose_count, cfg.revisit_fraction, cfg.seed, drive=1)
    train.session_id = "train"
    return world, train, route_map, route_query


def session_offsets(cfg: ExperimentConfig) -> dict[str, int]:
    """Global pose-index offsets that keep sensor noise streams distinct across sessions."""
    return {"map": 0, "query": cfg.map_count, "train": cfg.pose_count}


def build_experiment(cfg: ExperimentConfig = ExperimentConfig()) -> Experiment:
    world, train, route_map, route_query = simulate_trajectories(cfg)
    offsets = session_offsets(cfg)
    out = {}
    for name, traj in (("train", train), ("map", route_map), ("query", route_query)):
        clouds, scans = render_session(world, traj, cfg.sensors, cfg.seed, offsets[name])
        out[name] = describe_session(traj, clouds, scans, cfg.submap, cfg.descriptor)
    return Experiment(world, out["train"], out["map"], out["query"])


def signature_recall(model: EmbeddingModel, exp: Experiment, d: float = 3.0) -> dict[str, evaluation.Metrics]:
    """Metrics for each query/database modality pairing using learned signatures."""
    sigs = {}
    for part in ("map", "query"):
        data = getattr(exp, part)
        for m in (LIDAR, RADAR):
            sigs[part, m] = model.signatures(data.maps(m), m)
    cfg = evaluation.EvalConfig(distance_threshold=d)
    out = {}
    for name, (qm, dm) in COMBOS.items():
        db = retrieval.SignatureDatabase.from_signatures(sigs["map", dm], exp.map.trajectory.xy)
        idx, dist = retrieval.top1(db, sigs["query", qm])
        out[name] = evaluation.evaluate(idx, dist, exp.query.trajectory.xy, exp.map.trajectory.xy, cfg)
    return out


def scancontext_recall(exp: Experiment, combos=("L2L", "R2L"), candidate_frac: float = 0.01, d: float = 3.0):
    cfg = evaluation.EvalConfig(distance_threshold=d)
    out = {}
    for name in combos:
        qm, dm = COMBOS[name]
        db = retrieval.DescriptorDatabase.from_values(exp.map.maps(dm))
        res = [retrieval.coarse_to_fine_query(db, q, candidate_frac) for q in exp.query.maps(qm)]
        idx = np.array([r[0] for r in res])
        dist = np.array([r[1] for r in res])
        out[name] = evaluation.evaluate(idx, dist, exp.query.trajectory.xy, exp.map.trajectory.xy, cfg)
    return out
