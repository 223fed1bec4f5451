"""File formats: HAIR strands, PFM planes, PNG previews, PLY clouds, OVOL volumes, camera JSON."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera
from .strands import StrandSet


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


# ---------------------------------------------------------------------------
# HAIR

HAIR_HEADER = struct.Struct("<4sIIII f f 3f 88s")
assert HAIR_HEADER.size == 128
HAS_SEGMENTS, HAS_POINTS = 1, 2


@dataclass(eq=False)
class HairFile:
    strands: StrandSet
    default_segments: int = 0
    thickness: float = 0.2
    transparency: float = 0.0
    color: tuple = (0.0, 0.0, 0.0)
    info: str = ""

    @staticmethod
    def expected_size(n_strands: int, n_points: int, has_segments: bool = True) -> int:
        return 128 + (2 * n_strands if has_segments else 0) + 12 * n_points


def write_hair(path, strands: StrandSet | HairFile) -> None:
    hf = strands if isinstance(strands, HairFile) else HairFile(strands)
    s = hf.strands
    segs = s.counts - 1
    if len(segs) and segs.max() > 0xFFFF:
        raise FormatError("strand too long for u16 segment counts")
    info = hf.info.encode("utf-8")[:88]
    header = HAIR_HEADER.pack(b"HAIR", s.n_strands, len(s.points), HAS_SEGMENTS | HAS_POINTS,
                              int(hf.default_segments), hf.thickness, hf.transparency,
                              *hf.color, info)
    with open(path, "wb") as f:
        f.write(header)
        f.write(segs.astype("<u2").tobytes())
        f.write(s.points.astype("<f4").tobytes())


def read_hair(path) -> HairFile:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != b"HAIR":
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected b'HAIR'")
    if len(data) < 128:
        raise TruncatedFileError(f"{path}: header truncated ({len(data)} of 128 bytes)")
    _, ns, npts, flags, dseg, thick, transp, r, g, b, info = HAIR_HEADER.unpack_from(data)
    off = 128
    if flags & HAS_SEGMENTS:
        need = off + 2 * ns
        if len(data) < need:
            raise TruncatedFileError(f"{path}: segment array truncated")
        segs = np.frombuffer(data, "<u2", ns, off).astype(np.int64)
        off = need
    else:
        segs = np.full(ns, dseg, dtype=np.int64)
    if int((segs + 1).sum()) != npts:
        raise CountMismatchError(f"{path}: header declares {npts} points but segment counts "
                                 f"sum to {int((segs + 1).sum())}")
    if not flags & HAS_POINTS:
        raise FormatError(f"{path}: file carries no point array")
    need = off + 12 * npts
    if len(data) < need:
        raise TruncatedFileError(f"{path}: point array truncated ({len(data) - off} of "
                                 f"{12 * npts} bytes)")
    pts = np.frombuffer(data, "<f4", 3 * npts, off).reshape(-1, 3).astype(np.float64)
    strands = StrandSet(pts, segs + 1)
    return HairFile(strands, dseg, thick, transp, (r, g, b),
                    info.split(b"\0", 1)[0].decode("utf-8", "replace"))


# ---------------------------------------------------------------------------
# PFM (bottom-to-top rows per the format)

def write_pfm(path, planes: np.ndarray) -> None:
    a = np.asarray(planes, dtype="<f4")
    if a.ndim == 2:
        tag, C = b"Pf", 1
    elif a.ndim == 3 and a.shape[2] == 3:
        tag, C = b"PF", 3
    elif a.ndim == 3 and a.shape[2] == 2:
        # two-channel data goes into a colour PFM with a zero third channel
        a = np.concatenate([a, np.zeros(a.shape[:2] + (1,), "<f4")], axis=2)
        tag, C = b"PF", 3
    elif a.ndim == 3 and a.shape[2] == 1:
        a, tag, C = a[..., 0], b"Pf", 1
    else:
        raise FormatError("PFM supports 1, 2 or 3 channels")
    H, W = a.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n%d %d\n-1.0\n" % (W, H))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise BadMagicError(f"{path}: not a PFM file")
        W, H = map(int, f.readline().split())
        scale = float(f.readline())
        C = 3 if tag == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        raw = f.read()
    if len(raw) < 4 * W * H * C:
        raise TruncatedFileError(f"{path}: pixel data truncated")
    a = np.frombuffer(raw, dt, W * H * C).reshape((H, W, C) if C == 3 else (H, W))
    return a[::-1].astype(np.float32)


def write_png(path, plane: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    from PIL import Image
    a = np.asarray(plane, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 2:
        a = np.concatenate([a, np.zeros(a.shape[:2] + (1,))], axis=2)
    lo = np.nanmin(a) if lo is None else lo
    hi = np.nanmax(a) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    img = np.clip(np.nan_to_num((a - lo) / span), 0, 1)
    Image.fromarray((img * 255 + 0.5).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# PLY oriented clouds (ASCII)

def write_ply(path, cloud) -> None:
    n = len(cloud.points)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        for p in ("x", "y", "z", "nx", "ny", "nz", "confidence"):
            f.write(f"property float {p}\n")
        f.write("end_header\n")
        rows = np.column_stack([cloud.points, cloud.directions, cloud.confidences])
        np.savetxt(f, rows, fmt="%.9g")


def read_ply(path):
    from .orientation import OrientedPointCloud
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise BadMagicError(f"{path}: not a PLY file")
        n = 0
        while True:
            line = f.readline()
            if not line:
                raise TruncatedFileError(f"{path}: header not terminated")
            if line.startswith("element vertex"):
                n = int(line.split()[2])
            if line.strip() == "end_header":
                break
        rows = np.loadtxt(f, ndmin=2) if n else np.zeros((0, 7))
    if len(rows) != n:
        raise CountMismatchError(f"{path}: expected {n} vertices, read {len(rows)}")
    d = rows[:, 3:6]
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    return OrientedPointCloud(rows[:, :3], d / np.where(norm > 0, norm, 1), rows[:, 6],
                              np.zeros(n, dtype=np.int64))


# ---------------------------------------------------------------------------
# OVOL volume dump: 64-byte header then f32 xyz per voxel, x fastest

OVOL_HEADER = struct.Struct("<4s3If3f32s")
assert OVOL_HEADER.size == 64


def write_ovol(path, vol) -> None:
    nx, ny, nz = vol.dims
    header = OVOL_HEADER.pack(b"OVOL", nx, ny, nz, vol.h, *map(float, vol.origin), b"")
    with open(path, "wb") as f:
        f.write(header)
        # (nx, ny, nz, 3) -> z-major, x-fastest
        f.write(np.ascontiguousarray(vol.values.transpose(2, 1, 0, 3)).astype("<f4").tobytes())
        f.write(np.ascontiguousarray(vol.labels.transpose(2, 1, 0)).astype(np.uint8).tobytes())


def read_ovol(path):
    from .strandinit import OrientationVolume
    data = Path(path).read_bytes()
    if data[:4] != b"OVOL":
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected b'OVOL'")
    _, nx, ny, nz, h, ox, oy, oz, _ = OVOL_HEADER.unpack_from(data)
    nv = nx * ny * nz
    if len(data) < 64 + 13 * nv:
        raise TruncatedFileError(f"{path}: voxel data truncated")
    vals = np.frombuffer(data, "<f4", 3 * nv, 64).reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    labels = np.frombuffer(data, np.uint8, nv, 64 + 12 * nv).reshape(nz, ny, nx).transpose(2, 1, 0)
    return OrientationVolume(np.array([ox, oy, oz]), float(h), labels.copy(),
                             vals.astype(np.float64))


# ---------------------------------------------------------------------------
# cameras

def write_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in cameras]}, indent=1))


def read_cameras(path) -> list[Camera]:
    try:
        doc = json.loads(Path(path).read_text())
        return [Camera.from_dict(d) for d in doc["cameras"]]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed camera document ({e})") from e
