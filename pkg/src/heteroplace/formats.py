"""Little-endian binary formats, pose and key-value text files, and the session directory layout.

Every binary record starts with a 4-byte magic and a u32 version.  Readers
check the magic, the version, every shape field and the exact byte length,
so a damaged header raises instead of being misread.  Writers go through a
temporary file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptor import LIDAR, RADAR, PolarDescriptor, RadarPolarScan
from .geometry import PointCloud3D, Trajectory
from .net import LAYER_NAMES, NetParams, layer_channels

VERSION = 1
MODALITY_CODES = {LIDAR: 0, RADAR: 1}


class FormatError(ValueError):
    """Base class for unreadable files."""


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class Truncated(FormatError):
    pass


class TrailingBytes(FormatError):
    pass


class ShapeError(FormatError):
    pass


class InvalidPayload(FormatError):
    """Header is well formed but the values violate the record's invariants."""


class PoseFileError(FormatError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0
        if len(self.data) < 4:
            raise Truncated(f"{magic.decode()}: stream shorter than the magic")
        got = bytes(self.data[:4])
        if got != magic:
            raise BadMagic(f"expected magic {magic!r}, got {got!r}")
        self.pos = 4
        (version,) = self.unpack("<I")
        if version != VERSION:
            raise UnsupportedVersion(f"{magic.decode()} version {version} is not supported (expected {VERSION})")
        self.magic = magic.decode()

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise Truncated(f"{getattr(self, 'magic', '?')}: stream ends inside the header")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        if self.pos + nbytes > len(self.data):
            raise Truncated(f"{self.magic}: expected {nbytes} payload bytes, {len(self.data) - self.pos} left")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += nbytes
        return out

    def expect_payload(self, nbytes: int):
        left = len(self.data) - self.pos
        if left < nbytes:
            raise Truncated(f"{self.magic}: expected {nbytes} payload bytes, {left} left")
        if left > nbytes:
            raise TrailingBytes(f"{self.magic}: {left - nbytes} unexpected bytes after payload")

    def finish(self):
        if self.pos != len(self.data):
            raise TrailingBytes(f"{self.magic}: {len(self.data) - self.pos} unexpected bytes after payload")


def _positive_dims(name: str, *dims: int):
    if any(d < 1 for d in dims):
        raise ShapeError(f"{name}: dimensions must be >= 1, got {dims}")


_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write(path, data: bytes):
    """Write ``data`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------- point cloud


def encode_cloud(cloud: PointCloud3D) -> bytes:
    pts = np.ascontiguousarray(cloud.points, dtype="<f8")
    return b"PLCD" + struct.pack("<IQ", VERSION, len(pts)) + pts.tobytes()


def decode_cloud(data: bytes) -> PointCloud3D:
    r = _Reader(data, b"PLCD")
    (count,) = r.unpack("<Q")
    r.expect_payload(count * 24)
    pts = r.array("<f8", count * 3).reshape(count, 3)
    try:
        return PointCloud3D(pts.astype(float))
    except ValueError as e:
        raise InvalidPayload(f"PLCD: {e}") from None


# ---------------------------------------------------------------- radar


def encode_radar(scan: RadarPolarScan) -> bytes:
    img = np.ascontiguousarray(scan.intensities, dtype="<f4")
    head = struct.pack("<IIId", VERSION, scan.n_azimuth, scan.n_range, scan.range_resolution)
    return b"RADR" + head + img.tobytes()


def decode_radar(data: bytes) -> RadarPolarScan:
    r = _Reader(data, b"RADR")
    n_az, n_r, res = r.unpack("<IId")
    _positive_dims("RADR", n_az, n_r)
    r.expect_payload(n_az * n_r * 4)
    img = r.array("<f4", n_az * n_r).reshape(n_az, n_r)
    try:
        return RadarPolarScan(img.astype(float), float(res))
    except ValueError as e:
        raise InvalidPayload(f"RADR: {e}") from None


# ---------------------------------------------------------------- descriptor


def encode_descriptor(desc: PolarDescriptor) -> bytes:
    vals = np.ascontiguousarray(desc.values, dtype="<f4")
    head = struct.pack("<IBII", VERSION, MODALITY_CODES[desc.modality], desc.rings, desc.sectors)
    return b"SCTX" + head + vals.tobytes()


def decode_descriptor(data: bytes) -> PolarDescriptor:
    r = _Reader(data, b"SCTX")
    code, rings, sectors = r.unpack("<BII")
    names = {v: k for k, v in MODALITY_CODES.items()}
    if code not in names:
        raise InvalidPayload(f"SCTX: unknown modality code {code}")
    _positive_dims("SCTX", rings, sectors)
    r.expect_payload(rings * sectors * 4)
    vals = r.array("<f4", rings * sectors).reshape(rings, sectors).astype(float)
    if not np.all(np.isfinite(vals)):
        raise InvalidPayload("SCTX: non-finite values")
    return PolarDescriptor(vals, names[code])


# ---------------------------------------------------------------- signature


def encode_signature(sig: np.ndarray) -> bytes:
    sig = np.asarray(sig)
    if sig.ndim != 2:
        raise ValueError(f"signature must be 2-D, got shape {sig.shape}")
    h, w = sig.shape
    return b"SIGF" + struct.pack("<III", VERSION, h, w) + np.ascontiguousarray(sig, dtype="<f4").tobytes()


def decode_signature(data: bytes) -> np.ndarray:
    r = _Reader(data, b"SIGF")
    h, w = r.unpack("<II")
    _positive_dims("SIGF", h, w)
    r.expect_payload(h * w * 4)
    return r.array("<f4", h * w).reshape(h, w).astype(float)


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: NetParams
    step: int = 0
    seed: int = 0
    moment1: list[np.ndarray] | None = None  # Adam moments in params.tensors() order
    moment2: list[np.ndarray] | None = None


def encode_checkpoint(params: NetParams, step: int = 0, seed: int = 0, optimizer=None) -> bytes:
    """``optimizer`` is anything with ``m`` and ``v`` tensor lists (an AdamState); absent moments are zeros."""
    ts = params.tensors()
    if optimizer is not None:
        m1, m2 = optimizer.m, optimizer.v
    else:
        m1 = m2 = [np.zeros_like(t) for t in ts]
    parts = [b"HPRN", struct.pack("<IQQI", VERSION, step, seed, len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        parts.append(struct.pack("<4I", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    for moments in (m1, m2):
        for t in moments:
            parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def _widths_from_shapes(shapes) -> tuple[int, int, int]:
    if len(shapes) != len(LAYER_NAMES):
        raise ShapeError(f"HPRN: expected {len(LAYER_NAMES)} layers, file has {len(shapes)}")
    return (shapes[0][0], shapes[2][0], shapes[4][0])


def decode_checkpoint(data: bytes, widths=None) -> Checkpoint:
    """Parse a checkpoint.  With ``widths`` given, every layer shape must match that architecture."""
    r = _Reader(data, b"HPRN")
    step, seed, n_layers = r.unpack("<QQI")
    if n_layers != len(LAYER_NAMES):
        raise ShapeError(f"HPRN: expected {len(LAYER_NAMES)} layers, file has {n_layers}")
    shapes, weights, biases = [], [], []
    for _ in range(n_layers):
        shape = r.unpack("<4I")
        shapes.append(shape)
        o, c, kh, kw = shape
        if min(shape) < 1:
            raise ShapeError(f"HPRN: layer {LAYER_NAMES[len(shapes) - 1]} has empty shape {shape}")
        weights.append(r.array("<f4", o * c * kh * kw).reshape(shape))
        biases.append(r.array("<f4", o))
    expected = layer_channels(tuple(widths) if widths is not None else _widths_from_shapes(shapes))
    for name, (cin, cout), shape in zip(LAYER_NAMES, expected, shapes):
        if tuple(shape) != (cout, cin, 3, 3):
            raise ShapeError(f"HPRN: layer {name}: expected shape {(cout, cin, 3, 3)}, file has {tuple(shape)}")
    n_values = sum(w.size + b.size for w, b in zip(weights, biases))
    r.expect_payload(2 * n_values * 4)
    ts = [t for pair in zip(weights, biases) for t in pair]
    m1 = [r.array("<f4", t.size).reshape(t.shape) for t in ts]
    m2 = [r.array("<f4", t.size).reshape(t.shape) for t in ts]
    r.finish()
    all_t = ts + m1 + m2
    if not all(np.all(np.isfinite(t)) for t in all_t):
        raise InvalidPayload("HPRN: non-finite values")
    params = NetParams(_widths_from_shapes(shapes), weights, biases)
    return Checkpoint(params, step, seed, m1, m2)


# ---------------------------------------------------------------- file wrappers


def _write(encoder):
    def write(path, obj, *args, **kwargs):
        atomic_write(path, encoder(obj, *args, **kwargs))

    write.__doc__ = f"Atomically write the output of :func:`{encoder.__name__}` to ``path``."
    return write


def _read(decoder):
    def read(path, *args, **kwargs):
        return decoder(Path(path).read_bytes(), *args, **kwargs)

    read.__doc__ = f"Read ``path`` with :func:`{decoder.__name__}`."
    return read


write_cloud, read_cloud = _write(encode_cloud), _read(decode_cloud)
write_radar, read_radar = _write(encode_radar), _read(decode_radar)
write_descriptor, read_descriptor = _write(encode_descriptor), _read(decode_descriptor)
write_signature, read_signature = _write(encode_signature), _read(decode_signature)
write_checkpoint, read_checkpoint = _write(encode_checkpoint), _read(decode_checkpoint)


# ---------------------------------------------------------------- text files


def format_pose_lines(traj: Trajectory) -> str:
    lines = ["# t x y yaw"]
    for t, x, y, yaw in zip(traj.t, traj.x, traj.y, traj.yaw):
        lines.append(" ".join(repr(float(v)) for v in (t, x, y, yaw)))
    return "\n".join(lines) + "\n"


def write_pose_file(path, traj: Trajectory):
    atomic_write_text(path, format_pose_lines(traj))


def parse_pose_text(text: str, session_id: str = "") -> Trajectory:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 4:
            raise PoseFileError(f"line {lineno}: expected 't x y yaw', got {len(parts)} fields")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise PoseFileError(f"line {lineno}: not a number in {s!r}") from None
        if not all(np.isfinite(vals)):
            raise PoseFileError(f"line {lineno}: non-finite value")
        if rows and vals[0] <= rows[-1][0]:
            raise PoseFileError(f"line {lineno}: timestamp {vals[0]} is not after {rows[-1][0]}")
        rows.append(vals)
    if not rows:
        raise PoseFileError("pose file contains no poses")
    a = np.array(rows)
    return Trajectory(a[:, 0], a[:, 1], a[:, 2], a[:, 3], session_id)


def parse_pose_file(path, session_id: str | None = None) -> Trajectory:
    path = Path(path)
    sid = session_id if session_id is not None else path.parent.name
    return parse_pose_text(path.read_text(), sid)


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` per line; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (p.strip() for p in s.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_key_values(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


# ---------------------------------------------------------------- sessions


@dataclass
class Session:
    root: Path
    trajectory: Trajectory
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectory)

    def lidar_path(self, i: int) -> Path:
        return self.root / "lidar" / f"{i:06d}.bin"

    def radar_path(self, i: int) -> Path:
        return self.root / "radar" / f"{i:06d}.bin"

    def cloud(self, i: int) -> PointCloud3D:
        c = read_cloud(self.lidar_path(i))
        c.frame = self.trajectory[i]
        return c

    def radar(self, i: int) -> RadarPolarScan:
        return read_radar(self.radar_path(i))


def write_session(root, traj: Trajectory, clouds, scans, meta: dict | None = None) -> Session:
    root = Path(root)
    clouds, scans = list(clouds), list(scans)
    if len(clouds) != len(traj) or len(scans) != len(traj):
        raise ValueError("need exactly one cloud and one radar scan per pose")
    for i, (c, s) in enumerate(zip(clouds, scans)):
        write_cloud(root / "lidar" / f"{i:06d}.bin", c)
        write_radar(root / "radar" / f"{i:06d}.bin", s)
    write_pose_file(root / "poses.txt", traj)
    meta = dict(meta or {})
    atomic_write_text(root / "meta.txt", format_key_values(meta))
    return Session(root, traj, {k: str(v) for k, v in meta.items()})


def open_session(root) -> Session:
    """Validate the layout of a session directory and load its poses and metadata."""
    root = Path(root)
    if not (root / "poses.txt").is_file():
        raise FormatError(f"{root}: missing poses.txt")
    traj = parse_pose_file(root / "poses.txt", session_id=root.name)
    meta_path = root / "meta.txt"
    meta = parse_key_values(meta_path.read_text()) if meta_path.is_file() else {}
    expected = [f"{i:06d}.bin" for i in range(len(traj))]
    for sub in ("lidar", "radar"):
        d = root / sub
        names = sorted(p.name for p in d.iterdir()) if d.is_dir() else []
        if names != expected:
            raise FormatError(f"{d}: expected {len(expected)} files 000000.bin.. contiguous, found {len(names)}")
    return Session(root, traj, meta)
