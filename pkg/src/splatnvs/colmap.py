"""Readers and writers for COLMAP sparse reconstructions (``cameras``, ``images``,
``points3D``) in both the binary and the text layout.

Bytes are treated as the binary layout, ``str`` as the text layout. Track and
2D-observation records are decoded for framing but not kept, so writers emit
*canonical* files: empty tracks/observations, point ids numbered from 1, and
every camera stored as PINHOLE.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .errors import InvalidInputError, ParseError, UnsupportedModelError

# model id -> (name, number of params)
CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
    3: ("RADIAL", 5),
    4: ("OPENCV", 8),
    5: ("OPENCV_FISHEYE", 8),
    6: ("FULL_OPENCV", 12),
    7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4),
    9: ("RADIAL_FISHEYE", 5),
    10: ("THIN_PRISM_FISHEYE", 12),
}
MODEL_IDS = {name: mid for mid, (name, _) in CAMERA_MODELS.items()}

QUAT_TOL = 1e-3
# below this deviation a stored quaternion is kept bit-for-bit
_RENORM_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    errors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(pos) != len(col):
            raise InvalidInputError(f"{len(pos)} positions but {len(col)} colors")
        if not np.all(np.isfinite(pos)):
            raise InvalidInputError("point positions must be finite")
        if col.size and (col.min() < 0.0 or col.max() > 1.0):
            raise InvalidInputError("point colors must lie in [0, 1]")
        err = None
        if self.errors is not None:
            err = np.array(self.errors, dtype=np.float64).reshape(-1)
            if len(err) != len(pos):
                raise InvalidInputError("per-point error length differs from point count")
            err.setflags(write=False)
        pos.setflags(write=False)
        col.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "errors", err)

    def __len__(self):
        return len(self.positions)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.errors is None) != (other.errors is None):
            return False
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.colors, other.colors)
            and (self.errors is None or np.array_equal(self.errors, other.errors))
        )

    def subsample(self, max_points: int, seed: int = 0) -> PointCloud:
        """Uniform random subset of at most ``max_points`` points, order preserved."""
        if max_points <= 0 or len(self) <= max_points:
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=max_points, replace=False))
        err = None if self.errors is None else self.errors[idx]
        return PointCloud(self.positions[idx], self.colors[idx], err)


class ImageRecord(NamedTuple):
    pose: CameraPose
    camera_id: int
    name: str


class _Reader:
    """Little-endian cursor over a byte buffer that reports offsets on failure."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def read(self, fmt: str):
        s = struct.Struct("<" + fmt)
        if self.pos + s.size > len(self.data):
            raise ParseError(f"truncated file: needed {s.size} bytes, {len(self.data) - self.pos} left", self.pos)
        vals = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return vals

    def skip(self, nbytes: int):
        if self.pos + nbytes > len(self.data):
            raise ParseError(f"truncated file: needed {nbytes} bytes, {len(self.data) - self.pos} left", self.pos)
        self.pos += nbytes

    def cstring(self) -> str:
        end = bytes(self.data[self.pos :]).find(b"\0")
        if end < 0:
            raise ParseError("unterminated image name", self.pos)
        raw = bytes(self.data[self.pos : self.pos + end])
        self.pos += end + 1
        return raw.decode("utf-8")

    def finish(self):
        if self.pos != len(self.data):
            raise ParseError(f"{len(self.data) - self.pos} trailing bytes after declared records", self.pos)


def _text_lines(text: str):
    """Yield ``(line_number, stripped_line)`` for non-comment lines, blank lines included."""
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("#"):
            continue
        yield i, s


def _finite(vals, what: str, offset: int):
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(f"non-finite {what}", offset)


# ---------------------------------------------------------------- points3D


def _parse_points3d_records(data: bytes | str):
    """Decode a points3D file; returns ``(ids, xyz, rgb_u8, errors, track_lengths)``."""
    if isinstance(data, str):
        return _parse_points3d_text(data)
    r = _Reader(data)
    (count,) = r.read("Q")
    ids, xyz, rgb, err, tracks = [], [], [], [], []
    for _ in range(count):
        start = r.pos
        pid, x, y, z, cr, cg, cb, e, tlen = r.read("QdddBBBdQ")
        _finite((x, y, z), "coordinates", start + 8)
        r.skip(8 * tlen)
        ids.append(pid)
        xyz.append((x, y, z))
        rgb.append((cr, cg, cb))
        err.append(e)
        tracks.append(tlen)
    r.finish()
    return ids, xyz, rgb, err, tracks


def _parse_points3d_text(text: str):
    ids, xyz, rgb, err, tracks = [], [], [], [], []
    for lineno, line in _text_lines(text):
        if not line:
            continue
        f = line.split()
        if len(f) < 8 or (len(f) - 8) % 2:
            raise ParseError(f"malformed points3D line with {len(f)} fields", lineno)
        try:
            pid = int(f[0])
            x, y, z = (float(v) for v in f[1:4])
            c = tuple(int(v) for v in f[4:7])
            e = float(f[7])
        except ValueError as exc:
            raise ParseError(f"bad number in points3D line: {exc}", lineno) from None
        _finite((x, y, z), "coordinates", lineno)
        if any(not 0 <= v <= 255 for v in c):
            raise ParseError("color channel outside 0..255", lineno)
        ids.append(pid)
        xyz.append((x, y, z))
        rgb.append(c)
        err.append(e)
        tracks.append((len(f) - 8) // 2)
    return ids, xyz, rgb, err, tracks


def parse_points3d(data: bytes | str) -> PointCloud:
    _, xyz, rgb, err, _ = _parse_points3d_records(data)
    return PointCloud(
        np.array(xyz, dtype=np.float64).reshape(-1, 3),
        np.array(rgb, dtype=np.float64).reshape(-1, 3) / 255.0,
        np.array(err, dtype=np.float64),
    )


def _rgb_u8(colors: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)


def write_points3d(pc: PointCloud, binary: bool = True) -> bytes | str:
    rgb = _rgb_u8(pc.colors)
    err = pc.errors if pc.errors is not None else np.zeros(len(pc))
    if binary:
        rec = struct.Struct("<QdddBBBdQ")
        parts = [struct.pack("<Q", len(pc))]
        for i in range(len(pc)):
            x, y, z = pc.positions[i]
            parts.append(rec.pack(i + 1, x, y, z, *(int(c) for c in rgb[i]), float(err[i]), 0))
        return b"".join(parts)
    lines = [
        "# 3D point list with one line of data per point:",
        "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)",
        f"# Number of points: {len(pc)}",
    ]
    for i in range(len(pc)):
        x, y, z = (float(v) for v in pc.positions[i])
        r, g, b = rgb[i]
        lines.append(f"{i + 1} {x!r} {y!r} {z!r} {r} {g} {b} {float(err[i])!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- cameras


def _intrinsics(model_id: int, width: int, height: int, params, offset: int) -> CameraIntrinsics:
    name = CAMERA_MODELS.get(model_id, (None, 0))[0]
    if model_id == 0:
        f, cx, cy = params
        fx = fy = f
    elif model_id == 1:
        fx, fy, cx, cy = params
    else:
        raise UnsupportedModelError(model_id, name)
    try:
        return CameraIntrinsics(fx, fy, cx, cy, width, height)
    except InvalidInputError as exc:
        raise ParseError(f"invalid camera: {exc}", offset) from None


def parse_cameras(data: bytes | str) -> dict[int, CameraIntrinsics]:
    cams: dict[int, CameraIntrinsics] = {}
    if isinstance(data, str):
        for lineno, line in _text_lines(data):
            if not line:
                continue
            f = line.split()
            if len(f) < 4:
                raise ParseError("malformed camera line", lineno)
            model = f[1]
            if model not in MODEL_IDS:
                raise ParseError(f"unknown camera model {model!r}", lineno)
            mid = MODEL_IDS[model]
            nparams = CAMERA_MODELS[mid][1]
            if len(f) != 4 + nparams:
                raise ParseError(f"{model} expects {nparams} params, got {len(f) - 4}", lineno)
            try:
                cid, w, h = int(f[0]), int(f[2]), int(f[3])
                params = [float(v) for v in f[4:]]
            except ValueError as exc:
                raise ParseError(f"bad number in camera line: {exc}", lineno) from None
            cams[cid] = _intrinsics(mid, w, h, params, lineno)
        return cams
    r = _Reader(data)
    (count,) = r.read("Q")
    for _ in range(count):
        start = r.pos
        cid, mid, w, h = r.read("IiQQ")
        if mid not in CAMERA_MODELS:
            raise ParseError(f"unknown camera model id {mid}", start + 4)
        if mid not in (0, 1):
            raise UnsupportedModelError(mid, CAMERA_MODELS[mid][0])
        params = r.read("d" * CAMERA_MODELS[mid][1])
        cams[cid] = _intrinsics(mid, w, h, params, start)
    r.finish()
    return cams


def write_cameras(cams: dict[int, CameraIntrinsics], binary: bool = True) -> bytes | str:
    if binary:
        parts = [struct.pack("<Q", len(cams))]
        for cid, c in cams.items():
            parts.append(struct.pack("<IiQQdddd", cid, 1, c.width, c.height, c.fx, c.fy, c.cx, c.cy))
        return b"".join(parts)
    lines = [
        "# Camera list with one line of data per camera:",
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
        f"# Number of cameras: {len(cams)}",
    ]
    for cid, c in cams.items():
        lines.append(f"{cid} PINHOLE {c.width} {c.height} {c.fx!r} {c.fy!r} {c.cx!r} {c.cy!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- images


def _pose(q, t, offset: int) -> CameraPose:
    _finite(q, "quaternion", offset)
    _finite(t, "translation", offset)
    q = np.array(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > QUAT_TOL:
        raise ParseError(f"quaternion norm {n:.6f} deviates from 1 by more than {QUAT_TOL}", offset)
    if abs(n - 1.0) > _RENORM_EPS:
        q = q / n
    return CameraPose(q, t)


def parse_images(data: bytes | str) -> dict[int, ImageRecord]:
    images: dict[int, ImageRecord] = {}
    if isinstance(data, str):
        lines = list(_text_lines(data))
        i = 0
        while i < len(lines):
            lineno, line = lines[i]
            i += 1
            if not line:
                continue
            f = line.split()
            if len(f) < 10:
                raise ParseError("malformed image line", lineno)
            try:
                iid = int(f[0])
                q = [float(v) for v in f[1:5]]
                t = [float(v) for v in f[5:8]]
                cid = int(f[8])
            except ValueError as exc:
                raise ParseError(f"bad number in image line: {exc}", lineno) from None
            name = " ".join(f[9:])
            # the next line holds the 2D observations, possibly empty
            if i < len(lines):
                obs_lineno, obs = lines[i]
                i += 1
                if len(obs.split()) % 3:
                    raise ParseError("POINTS2D line must hold (X, Y, POINT3D_ID) triples", obs_lineno)
            images[iid] = ImageRecord(_pose(q, t, lineno), cid, name)
        return images
    r = _Reader(data)
    (count,) = r.read("Q")
    for _ in range(count):
        start = r.pos
        iid, qw, qx, qy, qz, tx, ty, tz, cid = r.read("IdddddddI")
        name = r.cstring()
        (npts,) = r.read("Q")
        r.skip(24 * npts)
        images[iid] = ImageRecord(_pose((qw, qx, qy, qz), (tx, ty, tz), start + 4), cid, name)
    r.finish()
    return images


def write_images(images: dict[int, ImageRecord], binary: bool = True) -> bytes | str:
    if binary:
        parts = [struct.pack("<Q", len(images))]
        for iid, rec in images.items():
            q, t = rec.pose.rotation, rec.pose.translation
            parts.append(struct.pack("<IdddddddI", iid, *q, *t, rec.camera_id))
            parts.append(rec.name.encode("utf-8") + b"\0")
            parts.append(struct.pack("<Q", 0))
        return b"".join(parts)
    lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)",
        f"# Number of images: {len(images)}",
    ]
    for iid, rec in images.items():
        q = " ".join(repr(float(v)) for v in rec.pose.rotation)
        t = " ".join(repr(float(v)) for v in rec.pose.translation)
        lines.append(f"{iid} {q} {t} {rec.camera_id} {rec.name}")
        lines.append("")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- directories


def _find(colmap_dir: Path, stem: str) -> Path:
    for suffix in (".bin", ".txt"):
        p = colmap_dir / f"{stem}{suffix}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}.bin or {stem}.txt in {colmap_dir}")


def _read(path: Path) -> bytes | str:
    return path.read_bytes() if path.suffix == ".bin" else path.read_text(encoding="utf-8")


def read_model(colmap_dir) -> tuple[dict[int, CameraIntrinsics], dict[int, ImageRecord], PointCloud]:
    """Load cameras, images and points from a directory (binary preferred over text)."""
    d = Path(colmap_dir)
    cams = parse_cameras(_read(_find(d, "cameras")))
    images = parse_images(_read(_find(d, "images")))
    points = parse_points3d(_read(_find(d, "points3D")))
    return cams, images, points


def write_model(colmap_dir, cams, images, points: PointCloud, binary: bool = True) -> None:
    d = Path(colmap_dir)
    d.mkdir(parents=True, exist_ok=True)
    ext = ".bin" if binary else ".txt"
    for stem, payload in (
        ("cameras", write_cameras(cams, binary)),
        ("images", write_images(images, binary)),
        ("points3D", write_points3d(points, binary)),
    ):
        path = d / f"{stem}{ext}"
        if binary:
            path.write_bytes(payload)
        else:
            path.write_text(payload, encoding="utf-8")


def summarize(colmap_dir) -> dict:
    """Counts, bounding box and mean track length of a reconstruction directory."""
    d = Path(colmap_dir)
    cams = parse_cameras(_read(_find(d, "cameras")))
    images = parse_images(_read(_find(d, "images")))
    _, xyz, _, _, tracks = _parse_points3d_records(_read(_find(d, "points3D")))
    xyz = np.array(xyz, dtype=np.float64).reshape(-1, 3)
    return {
        "cameras": len(cams),
        "images": len(images),
        "points": len(xyz),
        "bbox_min": xyz.min(axis=0).tolist() if len(xyz) else None,
        "bbox_max": xyz.max(axis=0).tolist() if len(xyz) else None,
        "mean_track_length": float(np.mean(tracks)) if tracks else 0.0,
    }
