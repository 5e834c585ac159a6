import math
import struct

import numpy as np
import pytest

from heteroplace import formats, net
from heteroplace.descriptor import PolarDescriptor, RadarPolarScan
from heteroplace.formats import (
    BadMagic,
    Checkpoint,
    ConfigError,
    FormatError,
    PoseFileError,
    ShapeError,
    Truncated,
    TrailingBytes,
    UnsupportedVersion,
)
from heteroplace.geometry import PointCloud3D, Trajectory
from heteroplace.training import AdamState

N = 1000


def rand_cloud(rng):
    return PointCloud3D(rng.normal(0, 50, (int(rng.integers(0, 40)), 3)))


def rand_radar(rng):
    shape = tuple(int(v) for v in rng.integers(1, 12, 2))
    return RadarPolarScan(rng.random(shape).astype(np.float32).astype(float), float(rng.uniform(0.05, 2.0)))


def rand_desc(rng):
    shape = tuple(int(v) for v in rng.integers(1, 12, 2))
    return PolarDescriptor(rng.random(shape).astype(np.float32).astype(float), ["lidar", "radar"][int(rng.integers(2))])


def rand_sig(rng):
    shape = tuple(int(v) for v in rng.integers(1, 12, 2))
    return rng.standard_normal(shape).astype(np.float32).astype(float)


def rand_ckpt(rng):
    widths = tuple(int(v) for v in rng.integers(1, 4, 3))
    p = net.init_params(int(rng.integers(1 << 30)), widths)
    p = p.with_tensors([(t + rng.standard_normal(t.shape)).astype(np.float32) for t in p.tensors()])
    state = AdamState([rng.standard_normal(t.shape).astype(np.float32) for t in p.tensors()], [rng.random(t.shape).astype(np.float32) for t in p.tensors()])
    return p, int(rng.integers(0, 1 << 62)), int(rng.integers(0, 1 << 62)), state


# ---------------------------------------------------------------- round trips


def test_empty_cloud_is_16_bytes():
    data = formats.encode_cloud(PointCloud3D(np.zeros((0, 3))))
    assert data == b"PLCD" + struct.pack("<IQ", 1, 0) and len(data) == 16


def test_cloud_layout():
    data = formats.encode_cloud(PointCloud3D([[1.0, 2.0, 3.0]]))
    assert data[16:] == struct.pack("<3d", 1.0, 2.0, 3.0)


def test_radar_and_descriptor_headers():
    r = formats.encode_radar(RadarPolarScan(np.zeros((2, 3)), 0.5))
    assert r[:24] == b"RADR" + struct.pack("<IIId", 1, 2, 3, 0.5) and len(r) == 24 + 24
    d = formats.encode_descriptor(PolarDescriptor(np.zeros((2, 3)), "radar"))
    assert d[:17] == b"SCTX" + struct.pack("<IBII", 1, 1, 2, 3) and len(d) == 17 + 24
    s = formats.encode_signature(np.zeros((4, 5)))
    assert s[:16] == b"SIGF" + struct.pack("<III", 1, 4, 5) and len(s) == 16 + 80


def test_round_trip_clouds():
    rng = np.random.default_rng(0)
    for _ in range(N):
        c = rand_cloud(rng)
        data = formats.encode_cloud(c)
        back = formats.decode_cloud(data)
        assert np.array_equal(back.points, c.points) and formats.encode_cloud(back) == data


def test_round_trip_radar():
    rng = np.random.default_rng(1)
    for _ in range(N):
        s = rand_radar(rng)
        data = formats.encode_radar(s)
        back = formats.decode_radar(data)
        assert np.array_equal(back.intensities, s.intensities) and back.range_resolution == s.range_resolution
        assert formats.encode_radar(back) == data


def test_round_trip_descriptors():
    rng = np.random.default_rng(2)
    for _ in range(N):
        d = rand_desc(rng)
        back = formats.decode_descriptor(formats.encode_descriptor(d))
        assert np.array_equal(back.values, d.values) and back.modality == d.modality


def test_round_trip_signatures():
    rng = np.random.default_rng(3)
    for _ in range(N):
        s = rand_sig(rng)
        data = formats.encode_signature(s)
        assert np.array_equal(formats.decode_signature(data), s)
        assert formats.encode_signature(formats.decode_signature(data)) == data


def test_round_trip_checkpoints():
    rng = np.random.default_rng(4)
    for _ in range(N):
        p, step, seed, state = rand_ckpt(rng)
        data = formats.encode_checkpoint(p, step, seed, state)
        ck = formats.decode_checkpoint(data)
        assert (ck.step, ck.seed, ck.params.widths) == (step, seed, p.widths)
        assert all(np.array_equal(a, b) for a, b in zip(ck.params.tensors(), p.tensors()))
        assert all(np.array_equal(a, b) for a, b in zip(ck.moment1, state.m))
        assert all(np.array_equal(a, b) for a, b in zip(ck.moment2, state.v))
        assert formats.encode_checkpoint(ck.params, ck.step, ck.seed, AdamState(ck.moment1, ck.moment2)) == data


def test_checkpoint_without_optimizer_has_zero_moments():
    p = net.init_params(0, (2, 2, 2))
    ck = formats.decode_checkpoint(formats.encode_checkpoint(p))
    assert all(not m.any() for m in ck.moment1 + ck.moment2)


def test_checkpoint_width_check():
    data = formats.encode_checkpoint(net.init_params(0, (2, 3, 4)))
    assert formats.decode_checkpoint(data, widths=(2, 3, 4)).params.widths == (2, 3, 4)
    with pytest.raises(ShapeError, match="enc1a"):
        formats.decode_checkpoint(data, widths=(3, 3, 4))


def test_file_wrappers(tmp_path):
    p = tmp_path / "a" / "s.bin"
    sig = rand_sig(np.random.default_rng(5))
    formats.write_signature(p, sig)
    assert np.array_equal(formats.read_signature(p), sig)
    assert [q.name for q in p.parent.iterdir()] == ["s.bin"]


# ---------------------------------------------------------------- corruption


def header_fields(kind, data):
    """Byte offsets of magic, version and shape fields for each format."""
    magic_version = list(range(8))
    if kind == "cloud":
        return magic_version + list(range(8, 16))
    if kind == "radar":
        return magic_version + list(range(8, 16))
    if kind == "desc":
        return magic_version + list(range(9, 17))
    if kind == "sig":
        return magic_version + list(range(8, 16))
    # checkpoint: layer count then a 16-byte shape record before every layer's payload
    offs = magic_version + list(range(24, 28))
    pos = 28
    for _ in range(len(net.LAYER_NAMES)):
        o, c, kh, kw = struct.unpack_from("<4I", data, pos)
        offs += list(range(pos, pos + 16))
        pos += 16 + 4 * (o * c * kh * kw + o)
    return offs


ENCODE = {
    "cloud": (lambda rng: formats.encode_cloud(rand_cloud(rng)), formats.decode_cloud),
    "radar": (lambda rng: formats.encode_radar(rand_radar(rng)), formats.decode_radar),
    "desc": (lambda rng: formats.encode_descriptor(rand_desc(rng)), formats.decode_descriptor),
    "sig": (lambda rng: formats.encode_signature(rand_sig(rng)), formats.decode_signature),
    "ckpt": (lambda rng: formats.encode_checkpoint(*rand_ckpt(rng)), formats.decode_checkpoint),
}


@pytest.mark.parametrize("kind", sorted(ENCODE))
def test_header_corruption_always_raises_typed_error(kind):
    rng = np.random.default_rng(list(ENCODE).index(kind))
    encode, decode = ENCODE[kind]
    for _ in range(N):
        data = bytearray(encode(rng))
        pos = int(rng.choice(header_fields(kind, data)))
        data[pos] ^= int(rng.integers(1, 256))
        with pytest.raises(FormatError):
            decode(bytes(data))


@pytest.mark.parametrize("kind", sorted(ENCODE))
def test_truncation_and_trailing_bytes(kind):
    rng = np.random.default_rng(7)
    encode, decode = ENCODE[kind]
    for _ in range(50):
        data = encode(rng)
        cut = int(rng.integers(0, len(data)))
        with pytest.raises((Truncated, TrailingBytes, FormatError)):
            decode(data[:cut])
        with pytest.raises(TrailingBytes):
            decode(data + b"\x00")


def test_distinct_error_kinds():
    data = formats.encode_signature(np.ones((2, 2)))
    with pytest.raises(BadMagic):
        formats.decode_signature(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersion):
        formats.decode_signature(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(Truncated):
        formats.decode_signature(data[:-1])
    with pytest.raises(ShapeError):
        formats.decode_signature(data[:8] + struct.pack("<II", 0, 2) + data[16:])
    with pytest.raises(formats.InvalidPayload):
        formats.decode_descriptor(b"SCTX" + struct.pack("<IBII", 1, 7, 1, 1) + b"\x00" * 4)


# ---------------------------------------------------------------- text files


def test_pose_line_example():
    t = formats.parse_pose_text("0.0 1.0 2.0 0.5\n")
    assert (t.x[0], t.y[0], t.yaw[0]) == (1.0, 2.0, 0.5)


def test_pose_yaw_wrapped():
    t = formats.parse_pose_text("# header\n\n0.0 0 0 7.0\n")
    assert t.yaw[0] == pytest.approx(7.0 - 2 * math.pi) and t.yaw[0] == pytest.approx(0.7168, abs=1e-4)


def test_pose_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    for _ in range(20):
        n = int(rng.integers(1, 50))
        traj = Trajectory(np.cumsum(rng.uniform(0.01, 1, n)), rng.normal(0, 100, n), rng.normal(0, 100, n), rng.uniform(-3, 3, n))
        formats.write_pose_file(tmp_path / "poses.txt", traj)
        back = formats.parse_pose_file(tmp_path / "poses.txt")
        for a, b in zip(back._cols(), traj._cols()):
            assert np.max(np.abs(a - b)) <= 1e-12


@pytest.mark.parametrize(
    "text,line",
    [("0 0 0 0\n1 2 3\n", 2), ("0 0 0 0\n# c\n1 a 0 0\n", 3), ("0 0 0 0\n0 1 1 1\n", 2), ("5 0 0 0\n4 0 0 0\n", 2), ("0 nan 0 0\n", 1)],
)
def test_pose_errors_name_line(text, line):
    with pytest.raises(PoseFileError, match=f"line {line}"):
        formats.parse_pose_text(text)


def test_key_values():
    kv = formats.parse_key_values("# c\nseed = 3\n epochs=2  # trailing\n\n")
    assert kv == {"seed": "3", "epochs": "2"}
    assert formats.parse_key_values(formats.format_key_values(kv)) == kv
    with pytest.raises(ConfigError, match="line 1"):
        formats.parse_key_values("novalue\n")
    with pytest.raises(ConfigError):
        formats.parse_key_values(" = 3\n")


# ---------------------------------------------------------------- sessions


def small_session(tmp_path, n=3):
    rng = np.random.default_rng(9)
    traj = Trajectory(np.arange(n, dtype=float), rng.random(n), rng.random(n), rng.random(n))
    clouds = [rand_cloud(rng) for _ in range(n)]
    scans = [rand_radar(rng) for _ in range(n)]
    return formats.write_session(tmp_path / "s", traj, clouds, scans, {"seed": 4}), clouds, scans


def test_session_round_trip(tmp_path):
    written, clouds, scans = small_session(tmp_path)
    s = formats.open_session(tmp_path / "s")
    assert len(s) == 3 and s.meta == {"seed": "4"}
    assert sorted(p.name for p in (tmp_path / "s" / "lidar").iterdir()) == ["000000.bin", "000001.bin", "000002.bin"]
    for i in range(3):
        assert np.array_equal(s.cloud(i).points, clouds[i].points)
        assert np.array_equal(s.radar(i).intensities, scans[i].intensities)


def test_session_layout_errors(tmp_path):
    small_session(tmp_path)
    (tmp_path / "s" / "radar" / "000001.bin").unlink()
    with pytest.raises(FormatError, match="radar"):
        formats.open_session(tmp_path / "s")
    with pytest.raises(FormatError, match="poses.txt"):
        formats.open_session(tmp_path / "missing")
    with pytest.raises(ValueError):
        formats.write_session(tmp_path / "t", Trajectory([0.0], [0], [0], [0]), [], [])
