"""Scene datasets: posed source frames, target views and an initialization point cloud."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .colmap import PointCloud, read_model
from .errors import InvalidInputError, LoadError, ParseError
from .images import check_image, check_mask, downscale_image, downscale_mask, read_image, read_mask


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SourceFrame:
    image: np.ndarray
    pose: CameraPose
    intrinsics: CameraIntrinsics
    mask: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        img = check_image(self.image, f"source frame {self.name!r}")
        h, w = img.shape[:2]
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise InvalidInputError(
                f"frame {self.name!r} is {w}x{h} but its camera is "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        mask = check_mask(self.mask, (h, w), f"mask of {self.name!r}")
        object.__setattr__(self, "image", _readonly(img.astype(np.float64)))
        object.__setattr__(self, "mask", _readonly(mask))


@dataclass(frozen=True)
class TargetView:
    pose: CameraPose
    intrinsics: CameraIntrinsics
    name: str = ""


@dataclass(frozen=True, eq=False)
class SceneDataset:
    sources: tuple[SourceFrame, ...]
    targets: tuple[TargetView, ...] = ()
    point_cloud: PointCloud = field(default_factory=lambda: PointCloud(np.zeros((0, 3)), np.zeros((0, 3))))

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.sources:
            raise InvalidInputError("a dataset needs at least one source frame")

    @property
    def N(self) -> int:
        return len(self.sources)

    @property
    def M(self) -> int:
        return len(self.targets)

    def with_sources(self, extra) -> SceneDataset:
        """Copy with ``extra`` frames appended after the existing sources."""
        return replace(self, sources=self.sources + tuple(extra))

    def downscaled(self, factor: int) -> SceneDataset:
        if factor == 1:
            return self
        sources = [
            SourceFrame(
                downscale_image(s.image, factor),
                s.pose,
                s.intrinsics.scaled(factor),
                downscale_mask(s.mask, factor),
                s.name,
            )
            for s in self.sources
        ]
        targets = [TargetView(t.pose, t.intrinsics.scaled(factor), t.name) for t in self.targets]
        return SceneDataset(sources, targets, self.point_cloud)


def pose_from_json(d: dict) -> CameraPose:
    """Pose from ``{qw, qx, qy, qz, tx, ty, tz}``; the quaternion is renormalized."""
    try:
        q = [float(d[k]) for k in ("qw", "qx", "qy", "qz")]
        t = [float(d[k]) for k in ("tx", "ty", "tz")]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"pose needs numeric qw,qx,qy,qz,tx,ty,tz: {exc}") from None
    return CameraPose.normalized(q, t)


def pose_to_json(pose: CameraPose) -> dict:
    qw, qx, qy, qz = (float(v) for v in pose.rotation)
    tx, ty, tz = (float(v) for v in pose.translation)
    return {"qw": qw, "qx": qx, "qy": qy, "qz": qz, "tx": tx, "ty": ty, "tz": tz}


def intrinsics_from_json(d: dict) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"intrinsics need fx,fy,cx,cy,width,height: {exc}") from None


def intrinsics_to_json(c: CameraIntrinsics) -> dict:
    return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height}


def load_dataset(manifest_path, max_points: int = 0, downscale: int = 1, seed: int = 0,
                 threads: int = 1) -> SceneDataset:
    """Load and validate a dataset manifest.

    The manifest is JSON::

        {"colmap_dir": "sparse/0",
         "sources": [{"image": "rgb/000.png", "mask": null, "image_id": 1}, ...],
         "targets": [{"pose": {"qw": ..., "tz": ...}, "camera_id": 1}, ...]}

    Relative paths resolve against the manifest's directory. Missing masks mean
    nothing is excluded. ``max_points > 0`` keeps a uniform random subset of the
    point cloud.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LoadError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {manifest_path} is not valid JSON: {exc}") from None
    root = manifest_path.parent
    for key in ("colmap_dir", "sources"):
        if key not in manifest:
            raise LoadError(f"manifest {manifest_path} lacks {key!r}")

    colmap_dir = root / manifest["colmap_dir"]
    try:
        cams, records, points = read_model(colmap_dir)
    except FileNotFoundError as exc:
        raise LoadError(str(exc)) from None
    except ParseError as exc:
        raise LoadError(f"{colmap_dir}: {exc}") from exc

    def camera(cid, where):
        if cid not in cams:
            raise LoadError(f"{where} references camera id {cid} absent from {colmap_dir}")
        return cams[cid]

    def load_source(i_entry):
        i, entry = i_entry
        iid = entry.get("image_id")
        if iid not in records:
            raise LoadError(f"source {i} references image id {iid} absent from {colmap_dir}")
        rec = records[iid]
        intr = camera(rec.camera_id, f"image {iid}")
        img_path = root / entry["image"]
        if not img_path.exists():
            raise LoadError(f"source image not found: {img_path}")
        img = read_image(img_path)
        h, w = img.shape[:2]
        if (w, h) != (intr.width, intr.height):
            raise LoadError(
                f"dimension mismatch: {img_path} is {w}x{h}, camera {rec.camera_id} is {intr.width}x{intr.height}"
            )
        mask = None
        if entry.get("mask"):
            mask_path = root / entry["mask"]
            if not mask_path.exists():
                raise LoadError(f"mask not found: {mask_path}")
            mask = read_mask(mask_path)
            if mask.shape != (h, w):
                raise LoadError(
                    f"dimension mismatch: mask {mask_path} is {mask.shape[1]}x{mask.shape[0]}, frame is {w}x{h}"
                )
        return SourceFrame(img, rec.pose, intr, mask, rec.name or str(entry["image"]))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        sources = list(pool.map(load_source, enumerate(manifest["sources"])))

    targets = []
    for j, entry in enumerate(manifest.get("targets", [])):
        try:
            pose = pose_from_json(entry["pose"])
        except (KeyError, InvalidInputError) as exc:
            raise LoadError(f"target {j}: {exc}") from None
        targets.append(TargetView(pose, camera(entry.get("camera_id"), f"target {j}"), entry.get("name", f"target_{j}")))

    if not sources:
        raise LoadError(f"manifest {manifest_path} lists no sources")
    ds = SceneDataset(sources, targets, points.subsample(max_points, seed))
    return ds.downscaled(downscale)
