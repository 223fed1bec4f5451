import struct

import numpy as np
import pytest

from strandrecon.camera import hemisphere_rig, look_at
from strandrecon.io import (BadMagicError, CountMismatchError, FormatError, HairFile,
                            TruncatedFileError, read_cameras, read_hair, read_ovol, read_pfm,
                            read_ply, write_cameras, write_hair, write_ovol, write_pfm, write_png,
                            write_ply)
from strandrecon.mesh import read_obj, sphere_mesh, write_obj
from strandrecon.orientation import OrientedPointCloud
from strandrecon.strandinit import OrientationVolume
from strandrecon.strands import StrandSet


def _strands(seed=0, n=30):
    rng = np.random.default_rng(seed)
    counts = rng.integers(2, 12, n)
    # f32-representable so the stored values compare exactly
    pts = rng.normal(scale=40.0, size=(counts.sum(), 3)).astype(np.float32).astype(np.float64)
    return StrandSet(pts, counts)


def test_hair_round_trip(tmp_path):
    s = _strands()
    hf = HairFile(s, default_segments=3, thickness=0.07, transparency=0.25, color=(0.5, 0.25, 1.0),
                  info="synthetic")
    p = tmp_path / "a.hair"
    write_hair(p, hf)
    back = read_hair(p)
    np.testing.assert_array_equal(back.strands.points, s.points)
    np.testing.assert_array_equal(back.strands.counts, s.counts)
    assert back.info == "synthetic" and back.default_segments == 3
    assert back.color == (0.5, 0.25, 1.0) and back.transparency == 0.25
    assert p.stat().st_size == HairFile.expected_size(s.n_strands, len(s.points))
    q = tmp_path / "b.hair"
    write_hair(q, back)
    assert p.read_bytes() == q.read_bytes()


def test_hair_header_layout(tmp_path):
    s = _strands(1, 4)
    p = tmp_path / "a.hair"
    write_hair(p, s)
    raw = p.read_bytes()
    magic, ns, npts, flags = struct.unpack_from("<4sIII", raw)
    assert (magic, ns, npts, flags) == (b"HAIR", 4, len(s.points), 3)
    segs = np.frombuffer(raw, "<u2", 4, 128)
    np.testing.assert_array_equal(segs, s.counts - 1)


def test_hair_errors(tmp_path):
    p = tmp_path / "a.hair"
    write_hair(p, _strands())
    raw = bytearray(p.read_bytes())
    bad = tmp_path / "bad.hair"
    bad.write_bytes(b"HAIX" + bytes(raw[4:]))
    with pytest.raises(BadMagicError):
        read_hair(bad)
    bad.write_bytes(bytes(raw[:-5]))
    with pytest.raises(TruncatedFileError):
        read_hair(bad)
    bad.write_bytes(bytes(raw[:60]))
    with pytest.raises(TruncatedFileError):
        read_hair(bad)
    wrong = raw.copy()
    struct.pack_into("<I", wrong, 8, struct.unpack_from("<I", raw, 8)[0] + 1)
    bad.write_bytes(bytes(wrong))
    with pytest.raises(CountMismatchError):
        read_hair(bad)
    for e in (BadMagicError, TruncatedFileError, CountMismatchError):
        assert issubclass(e, FormatError)


def test_hair_without_segment_array(tmp_path):
    s = StrandSet(np.arange(18, dtype=np.float32).reshape(6, 3).astype(float), np.array([3, 3]))
    header = struct.pack("<4sIIII f f 3f 88s", b"HAIR", 2, 6, 2, 2, 0.1, 0.0, 0, 0, 0, b"")
    p = tmp_path / "d.hair"
    p.write_bytes(header + s.points.astype("<f4").tobytes())
    back = read_hair(p)
    np.testing.assert_array_equal(back.strands.counts, [3, 3])
    np.testing.assert_array_equal(back.strands.points, s.points)


def test_pfm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for shape in ((7, 5), (6, 4, 3)):
        a = rng.normal(size=shape).astype(np.float32)
        write_pfm(tmp_path / "x.pfm", a)
        np.testing.assert_array_equal(read_pfm(tmp_path / "x.pfm"), a)
    two = rng.normal(size=(3, 8, 2)).astype(np.float32)
    write_pfm(tmp_path / "o.pfm", two)
    back = read_pfm(tmp_path / "o.pfm")
    np.testing.assert_array_equal(back[..., :2], two)
    np.testing.assert_array_equal(back[..., 2], 0.0)
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n255\n")
    with pytest.raises(BadMagicError):
        read_pfm(tmp_path / "bad.pfm")
    with pytest.raises(FormatError):
        write_pfm(tmp_path / "y.pfm", np.zeros((2, 2, 5)))


def test_pfm_bottom_to_top(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    write_pfm(tmp_path / "x.pfm", a)
    raw = (tmp_path / "x.pfm").read_bytes()
    first = np.frombuffer(raw[-16:], "<f4")
    np.testing.assert_array_equal(first, [3, 4, 1, 2])


def test_png_preview(tmp_path):
    from PIL import Image
    write_png(tmp_path / "p.png", np.linspace(0, 1, 12).reshape(3, 4))
    im = np.asarray(Image.open(tmp_path / "p.png"))
    assert im.shape == (3, 4) and im.min() == 0 and im.max() == 255


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    c = OrientedPointCloud(rng.normal(size=(20, 3)), d, rng.uniform(0, 1, 20),
                           np.zeros(20, np.int64))
    write_ply(tmp_path / "c.ply", c)
    back = read_ply(tmp_path / "c.ply")
    np.testing.assert_allclose(back.points, c.points, rtol=1e-8)
    np.testing.assert_allclose(back.directions, c.directions, rtol=1e-8)
    np.testing.assert_allclose(back.confidences, c.confidences, rtol=1e-8)
    write_ply(tmp_path / "e.ply", OrientedPointCloud.empty())
    assert len(read_ply(tmp_path / "e.ply")) == 0
    (tmp_path / "bad.ply").write_text("obj\n")
    with pytest.raises(BadMagicError):
        read_ply(tmp_path / "bad.ply")


def test_ovol_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 4, (5, 4, 3)).astype(np.uint8)
    vals = rng.normal(size=(5, 4, 3, 3)).astype(np.float32).astype(np.float64)
    vol = OrientationVolume(np.array([-1.5, 2.0, 0.25]), 0.5, labels, vals)
    p = tmp_path / "v.ovol"
    write_ovol(p, vol)
    raw = p.read_bytes()
    assert raw[:4] == b"OVOL" and len(raw) == 64 + 13 * labels.size
    # x-fastest: the second stored triple is voxel (1, 0, 0)
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4", 3, 64 + 12), vals[1, 0, 0])
    back = read_ovol(p)
    np.testing.assert_array_equal(back.values, vals)
    np.testing.assert_array_equal(back.labels, labels)
    assert back.h == 0.5
    np.testing.assert_array_equal(back.origin, vol.origin)
    p.write_bytes(raw[:100])
    with pytest.raises(TruncatedFileError):
        read_ovol(p)


def test_cameras_round_trip(tmp_path):
    cams = hemisphere_rig(5, 300.0, fov_radius=80.0, resolution=64)
    cams.append(look_at([0, -300, 50], [0, 0, 0], [0, 0, 1], 120, 90, 64, 48))
    write_cameras(tmp_path / "c.json", cams)
    back = read_cameras(tmp_path / "c.json")
    assert len(back) == len(cams)
    for a, b in zip(cams, back):
        np.testing.assert_allclose(a.R, b.R, atol=1e-15)
        np.testing.assert_allclose(a.t, b.t, atol=1e-12)
        assert (a.fx, a.cy, a.width, a.height) == (b.fx, b.cy, b.width, b.height)
    (tmp_path / "bad.json").write_text('{"views": []}')
    with pytest.raises(FormatError):
        read_cameras(tmp_path / "bad.json")


def test_obj_round_trip(tmp_path):
    m = sphere_mesh(10.0, 100)
    write_obj(tmp_path / "m.obj", m)
    back = read_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    assert read_obj(tmp_path / "q.obj").triangles.tolist() == [[0, 1, 2], [0, 2, 3]]
