"""Command-line pipeline: simulate, submap, describe, train, embed, retrieve, eval, loops.

Every option can also come from a ``--config`` file of ``key = value`` lines.
Precedence is command-line flag, then config file, then built-in default.
Exit status is 0 on success, 1 on a usage error and 2 on a data error.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, formats, pipeline, retrieval, sim, training
from .descriptor import LIDAR, MODALITIES, RADAR, DescriptorConfig, lidar_descriptor, radar_descriptor
from .geometry import SubmapBounds, SubmapConfig, Trajectory, build_submap

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Key:
    name: str
    type: type | object
    default: object
    help: str


def _keys(*specs) -> dict[str, Key]:
    return {k.name: k for k in (Key(*s) for s in specs)}


_S, _W, _T, _D = sim.SensorConfig(), sim.WorldConfig(), training.TrainConfig(), DescriptorConfig()

COMMON = _keys(
    ("input", str, None, "input directory"),
    ("output", str, None, "output directory"),
)
SIMULATE = _keys(
    ("seed", int, None, "world, route and sensor-noise seed (required)"),
    ("pose-count", int, 900, "poses on the route (map + query)"),
    ("map-count", int, 600, "leading poses that form the map session"),
    ("revisit-fraction", float, 1.0 / 3.0, "trailing fraction of poses that revisits the route"),
    ("world-extent", float, _W.extent, "side of the square world, metres"),
    ("wall-count", int, _W.wall_count, "number of wall segments"),
    ("pole-count", int, _W.pole_count, "number of reflective poles"),
    ("pole-radius", float, _W.pole_radius, "pole radius, metres"),
    ("lidar-beams", int, _S.lidar_beams, "lidar beams per revolution"),
    ("lidar-range-noise", float, _S.lidar_range_noise, "lidar range noise std, metres"),
    ("radar-azimuth-bins", int, _S.radar_azimuth_bins, "radar azimuth bins"),
    ("radar-range-bins", int, _S.radar_range_bins, "radar range bins"),
    ("radar-range-resolution", float, _S.radar_range_resolution, "radar metres per range bin"),
    ("radar-falloff", float, _S.radar_falloff, "range at which radar returns drop to half strength, metres"),
    ("radar-falloff-floor", float, _S.radar_falloff_floor, "lowest falloff gain"),
    ("speckle-sigma", float, _S.speckle_sigma, "multiplicative radar speckle std"),
    ("streak-probability", float, _S.streak_probability, "per-scan saturation streak probability"),
    ("ghost-probability", float, _S.ghost_probability, "per-return ghost echo probability"),
)
SUBMAP = _keys(
    ("submap-r-max", float, 80.0, "max distance from the centre pose, metres"),
    ("submap-theta-max", float, math.pi / 2, "max heading difference from the centre pose, radians"),
)
DESCRIBE = _keys(
    ("bounds", str, None, "bounds.txt from the submap stage (computed when absent)"),
    ("rings", int, _D.rings, "descriptor rings"),
    ("sectors", int, _D.sectors, "descriptor sectors"),
    ("descriptor-r-max", float, _D.r_max, "descriptor range, metres"),
)
TRAIN = _keys(
    ("seed", int, None, "initialisation and sampling seed (required)"),
    ("margin", float, _T.margin, "triplet margin"),
    ("alpha", float, _T.alpha, "weight of the transform loss in combined mode"),
    ("learning-rate", float, _T.learning_rate, "initial Adam learning rate"),
    ("lr-decay", float, _T.lr_decay, "learning-rate factor per epoch"),
    ("batch-size", int, _T.batch_size, "triplets per step"),
    ("epochs", int, _T.epochs, "training epochs"),
    ("samples-per-epoch", int, _T.samples_per_epoch, "triplets per epoch"),
    ("d-pos", float, _T.d_pos, "max anchor-positive distance, metres"),
    ("d-neg", float, _T.d_neg, "min anchor-negative distance, metres"),
    ("loss-mode", str, _T.loss_mode, "joint-L1, combined-L1-2 or separate-per-modality"),
    ("two-networks", _bool, _T.two_networks, "separate encoders per modality in joint modes"),
)
EMBED = _keys(("model", str, None, "model directory from the train stage"))
RETRIEVE = _keys(
    ("database", str, None, "signature directory used as the database"),
    ("query", str, None, "signature directory used as queries"),
    ("query-modality", str, RADAR, "lidar or radar"),
    ("database-modality", str, LIDAR, "lidar or radar"),
)
EVAL = _keys(
    ("distance-threshold", float, 3.0, "true-match radius, metres"),
    ("pr-thresholds", int, 200, "points on the precision-recall curve"),
)
LOOPS = _keys(
    ("modality", str, LIDAR, "lidar or radar"),
    ("loop-threshold", float, -0.3, "minimum similarity (negative signature distance)"),
    ("loop-window", int, 50, "ignore pairs fewer than this many poses apart"),
)

COMMANDS = {
    "simulate": ("simulate a world and write train, map and query sessions", [COMMON, SIMULATE]),
    "submap": ("compute submap bounds for a session", [COMMON, SUBMAP]),
    "describe": ("build lidar and radar polar descriptors for a session", [COMMON, SUBMAP, DESCRIBE]),
    "train": ("train the embedding network on a descriptor directory", [COMMON, TRAIN]),
    "embed": ("compute signatures for a descriptor directory", [COMMON, EMBED]),
    "retrieve": ("top-1 retrieval and similarity matrix", [{"output": COMMON["output"]}, RETRIEVE]),
    "eval": ("recall@1 and precision-recall from a retrieval directory", [COMMON, EVAL]),
    "loops": ("loop closures within one signature directory", [COMMON, LOOPS]),
}
REQUIRED = {
    "simulate": ("seed", "output"),
    "submap": ("input", "output"),
    "describe": ("input", "output"),
    "train": ("seed", "input", "output"),
    "embed": ("input", "model", "output"),
    "retrieve": ("database", "query", "output"),
    "eval": ("input", "output"),
    "loops": ("input", "output"),
}
ALL_KEYS: dict[str, Key] = {"config": Key("config", str, None, "key = value configuration file")}
for _, groups in COMMANDS.values():
    for g in groups:
        ALL_KEYS.update(g)


def _dest(name: str) -> str:
    return name.replace("-", "_")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heteroplace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (help_text, groups) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="PATH", help="key = value configuration file")
        for g in groups:
            for key in g.values():
                shown = "required" if key.name in REQUIRED[name] else f"default: {key.default}"
                p.add_argument(f"--{key.name}", dest=_dest(key.name), default=None, metavar="VALUE", help=f"{key.help} ({shown})")
    return parser


def resolve(command: str, flags: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults, converting each value to its type."""
    file_values: dict[str, str] = {}
    if getattr(flags, "config", None):
        try:
            text = Path(flags.config).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
        try:
            raw = formats.parse_key_values(text)
        except formats.ConfigError as e:
            raise UsageError(f"{flags.config}: {e}") from None
        for k, v in raw.items():
            name = k.replace("_", "-")
            if name not in ALL_KEYS or name == "config":
                valid = ", ".join(sorted(n for n in ALL_KEYS if n != "config"))
                raise UsageError(f"unknown config key {k!r}; valid keys: {valid}")
            file_values[name] = v
    out = {}
    for g in COMMANDS[command][1]:
        for key in g.values():
            value = getattr(flags, _dest(key.name), None)
            if value is None:
                value = file_values.get(key.name)
            if value is None:
                out[key.name] = key.default
                continue
            try:
                out[key.name] = key.type(value)
            except ValueError:
                raise UsageError(f"--{key.name}: invalid value {value!r}") from None
    for name in REQUIRED[command]:
        if out.get(name) is None:
            raise UsageError(f"{command}: missing required --{name}")
    return out


# ---------------------------------------------------------------- directory helpers


def _write_array_dir(root: Path, traj: Trajectory, items: dict[str, list], writer):
    for sub, values in items.items():
        for i, v in enumerate(values):
            writer(root / sub / f"{i:06d}.bin", v)
    formats.write_pose_file(root / "poses.txt", traj)


def _read_array_dir(root: Path, reader, subs=MODALITIES):
    traj = formats.parse_pose_file(root / "poses.txt")
    out = {}
    for sub in subs:
        out[sub] = [reader(root / sub / f"{i:06d}.bin") for i in range(len(traj))]
    return traj, out


def _write_bounds(path: Path, bounds: list[SubmapBounds]):
    lines = ["# index start end"] + [f"{b.center_index} {b.start_index} {b.end_index}" for b in bounds]
    formats.atomic_write_text(path, "\n".join(lines) + "\n")


def _read_bounds(path: Path, n: int) -> list[SubmapBounds]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            c, a, b = (int(v) for v in s.split())
            rows.append(SubmapBounds(a, c, b))
        except ValueError as e:
            raise formats.FormatError(f"{path} line {lineno}: {e}") from None
    if [b.center_index for b in rows] != list(range(n)) or any(b.end_index >= n for b in rows):
        raise formats.FormatError(f"{path}: need one bound per pose, indices 0..{n - 1}")
    return rows


def _modality(value: str, key: str) -> str:
    if value not in MODALITIES:
        raise UsageError(f"--{key} must be one of {MODALITIES}, got {value!r}")
    return value


def _model_files(model_dir: Path) -> dict[str, Path]:
    shared = model_dir / "model.hprn"
    if shared.is_file():
        return {RADAR: shared, LIDAR: shared}
    files = {m: model_dir / f"{m}.hprn" for m in MODALITIES}
    missing = [str(p) for p in files.values() if not p.is_file()]
    if missing:
        raise formats.FormatError(f"{model_dir}: no model.hprn and missing {', '.join(missing)}")
    return files


# ---------------------------------------------------------------- subcommands


def cmd_simulate(o: dict) -> None:
    try:
        sensors = sim.SensorConfig(
            lidar_beams=o["lidar-beams"],
            lidar_range_noise=o["lidar-range-noise"],
            radar_azimuth_bins=o["radar-azimuth-bins"],
            radar_range_bins=o["radar-range-bins"],
            radar_range_resolution=o["radar-range-resolution"],
            radar_falloff=o["radar-falloff"],
            radar_falloff_floor=o["radar-falloff-floor"],
            speckle_sigma=o["speckle-sigma"],
            streak_probability=o["streak-probability"],
            ghost_probability=o["ghost-probability"],
        )
        world_cfg = sim.WorldConfig(
            extent=o["world-extent"],
            wall_count=o["wall-count"],
            pole_count=o["pole-count"],
            pole_radius=o["pole-radius"],
            seed=o["seed"],
        )
        cfg = pipeline.ExperimentConfig(
            seed=o["seed"],
            pose_count=o["pose-count"],
            map_count=o["map-count"],
            revisit_fraction=o["revisit-fraction"],
            world=world_cfg,
            sensors=sensors,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    world, train, route_map, route_query = pipeline.simulate_trajectories(cfg)
    offsets = pipeline.session_offsets(cfg)
    out = Path(o["output"])
    for name, traj in (("train", train), ("map", route_map), ("query", route_query)):
        clouds, scans = pipeline.render_session(world, traj, sensors, cfg.seed, offsets[name])
        meta = {"session": name, "seed": cfg.seed, "pose_index_offset": offsets[name]}
        meta.update({k: o[k] for k in SIMULATE if k != "seed"})
        formats.write_session(out / name, traj, clouds, scans, meta)


def _submap_cfg(o: dict) -> SubmapConfig:
    try:
        return SubmapConfig(r_max=o["submap-r-max"], theta_max=o["submap-theta-max"])
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_submap(o: dict) -> None:
    traj = formats.open_session(o["input"]).trajectory
    _write_bounds(Path(o["output"]) / "bounds.txt", pipeline.all_bounds(traj, _submap_cfg(o)))


def cmd_describe(o: dict) -> None:
    try:
        dcfg = DescriptorConfig(rings=o["rings"], sectors=o["sectors"], r_max=o["descriptor-r-max"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    session = formats.open_session(o["input"])
    traj = session.trajectory
    if o["bounds"]:
        bounds = _read_bounds(Path(o["bounds"]), len(traj))
    else:
        bounds = pipeline.all_bounds(traj, _submap_cfg(o))
    clouds = [session.cloud(i) for i in range(len(traj))]
    lidar, radar = [], []
    for i, b in enumerate(bounds):
        cloud = build_submap(traj, clouds[b.start_index : b.end_index + 1], b, r_max=dcfg.r_max)
        lidar.append(lidar_descriptor(cloud, dcfg))
        radar.append(radar_descriptor(session.radar(i), dcfg))
    _write_array_dir(Path(o["output"]), traj, {LIDAR: lidar, RADAR: radar}, formats.write_descriptor)


def _load_locations(root: Path) -> training.LocationSet:
    traj, desc = _read_array_dir(root, formats.read_descriptor)
    stack = {m: np.array([d.values for d in desc[m]]) for m in MODALITIES}
    return training.LocationSet(traj.xy, stack[LIDAR], stack[RADAR])


def cmd_train(o: dict) -> None:
    try:
        cfg = training.TrainConfig(
            margin=o["margin"],
            alpha=o["alpha"],
            learning_rate=o["learning-rate"],
            lr_decay=o["lr-decay"],
            batch_size=o["batch-size"],
            epochs=o["epochs"],
            samples_per_epoch=o["samples-per-epoch"],
            d_pos=o["d-pos"],
            d_neg=o["d-neg"],
            loss_mode=o["loss-mode"],
            two_networks=o["two-networks"],
            seed=o["seed"],
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    data = _load_locations(Path(o["input"]))
    result = training.train(data, cfg)
    out = Path(o["output"])
    step = len(result.history)
    if result.model.is_shared:
        formats.write_checkpoint(out / "model.hprn", result.model.radar, step, cfg.seed, result.optimizer[0])
    else:
        for m, state in zip((RADAR, LIDAR), result.optimizer):
            formats.write_checkpoint(out / f"{m}.hprn", result.model.params_for(m), step, cfg.seed, state)
    rows = "".join(f"{h.step},{h.epoch},{float(h.loss)!r},{float(h.lr)!r}\n" for h in result.history)
    formats.atomic_write_text(out / "history.csv", "step,epoch,loss,lr\n" + rows)
    formats.atomic_write_text(out / "train.txt", formats.format_key_values({k: o[k] for k in TRAIN}))


def cmd_embed(o: dict) -> None:
    files = _model_files(Path(o["model"]))
    params = {m: formats.read_checkpoint(p).params for m, p in files.items()}
    model = training.EmbeddingModel(params[RADAR], params[LIDAR])
    traj, desc = _read_array_dir(Path(o["input"]), formats.read_descriptor)
    sigs = {}
    for m in MODALITIES:
        maps = np.array([d.values for d in desc[m]])
        sigs[m] = list(model.signatures(maps, m))
    _write_array_dir(Path(o["output"]), traj, sigs, formats.write_signature)


def cmd_retrieve(o: dict) -> None:
    qm = _modality(o["query-modality"], "query-modality")
    dm = _modality(o["database-modality"], "database-modality")
    q_traj, q_sig = _read_array_dir(Path(o["query"]), formats.read_signature, (qm,))
    d_traj, d_sig = _read_array_dir(Path(o["database"]), formats.read_signature, (dm,))
    db = retrieval.SignatureDatabase.from_signatures(np.array(d_sig[dm]), d_traj.xy)
    queries = retrieval.SignatureDatabase.from_signatures(np.array(q_sig[qm]), q_traj.xy)
    idx, dist = retrieval.top1(db, queries.signatures)
    out = Path(o["output"])
    retrieval.write_similarity_csv(out / "similarity.csv", retrieval.similarity_matrix(queries, db))
    rows = "".join(f"{i},{int(db.ids[j])},{float(d)!r}\n" for i, (j, d) in enumerate(zip(idx, dist)))
    formats.atomic_write_text(out / "matches.csv", "query_id,match_id,distance\n" + rows)
    formats.write_pose_file(out / "query_poses.txt", q_traj)
    formats.write_pose_file(out / "database_poses.txt", d_traj)


def _read_matches(path: Path, n_queries: int, n_db: int):
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "query_id,match_id,distance":
        raise formats.FormatError(f"{path}: bad header")
    try:
        rows = [line.split(",") for line in lines[1:] if line]
        q = np.array([int(r[0]) for r in rows])
        m = np.array([int(r[1]) for r in rows])
        d = np.array([float(r[2]) for r in rows])
    except (ValueError, IndexError):
        raise formats.FormatError(f"{path}: malformed row") from None
    if not np.array_equal(q, np.arange(n_queries)) or np.any((m < 0) | (m >= n_db)):
        raise formats.FormatError(f"{path}: rows do not match the stored poses")
    return m, d


def cmd_eval(o: dict) -> None:
    root = Path(o["input"])
    q_traj = formats.parse_pose_file(root / "query_poses.txt")
    d_traj = formats.parse_pose_file(root / "database_poses.txt")
    idx, dist = _read_matches(root / "matches.csv", len(q_traj), len(d_traj))
    try:
        cfg = evaluation.EvalConfig(distance_threshold=o["distance-threshold"], pr_thresholds=o["pr-thresholds"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    metrics = evaluation.evaluate(idx, dist, q_traj.xy, d_traj.xy, cfg)
    out = Path(o["output"])
    evaluation.write_metrics_csv(out / "metrics.csv", metrics)
    evaluation.write_pr_csv(out / "pr.csv", metrics.pr_points)


def cmd_loops(o: dict) -> None:
    m = _modality(o["modality"], "modality")
    traj, sig = _read_array_dir(Path(o["input"]), formats.read_signature, (m,))
    db = retrieval.SignatureDatabase.from_signatures(np.array(sig[m]), traj.xy)
    sim_m = retrieval.similarity_matrix(db, db)
    pairs = evaluation.detect_loops(sim_m, o["loop-threshold"], o["loop-window"])
    rows = "".join(f"{i},{j},{float(sim_m.values[i, j])!r}\n" for i, j in pairs)
    formats.atomic_write_text(Path(o["output"]) / "loops.csv", "query_id,match_id,similarity\n" + rows)


HANDLERS = {
    "simulate": cmd_simulate,
    "submap": cmd_submap,
    "describe": cmd_describe,
    "train": cmd_train,
    "embed": cmd_embed,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "loops": cmd_loops,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        options = resolve(args.command, args)
        HANDLERS[args.command](options)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (formats.FormatError, formats.ConfigError, OSError, ValueError, training.TrainingDivergence) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
