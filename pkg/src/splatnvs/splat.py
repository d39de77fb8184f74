"""Gaussian-splat scenes and their forward renderer.

Each primitive is projected to a 2D Gaussian (EWA splatting with a 0.3 px²
low-pass dilation), primitives are sorted globally by camera-space depth and
alpha-composited front to back. Colors are constant RGB per primitive.

The binary scene container is::

    b"GSPL" | u32 version | u64 count | 3 x f32 background
    count x (3 f32 mean, 4 f32 rotation, 3 f32 log_scale, 1 f32 opacity_logit, 3 f32 color)

all little-endian.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .camera import NEAR_PLANE, CameraIntrinsics, CameraPose, quat_to_rotmat
from .errors import InvalidInputError, ParseError

DILATION = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
DET_MIN = 1e-12
# chi-square(2 dof) quantile holding 99% of a 2D Gaussian's mass: -2 ln(0.01)
MASS99 = -2.0 * math.log(0.01)
# (primitive x pixel) entries evaluated per chunk
CHUNK_BUDGET = 1 << 21

MAGIC = b"GSPL"
VERSION = 1
_FIELDS = (("means", 3), ("rotations", 4), ("log_scales", 3), ("opacity_logits", 1), ("colors", 3))
_RECORD = sum(n for _, n in _FIELDS)


def sigmoid(x):
    return expit(x)


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class GaussianPrimitive:
    mean: tuple[float, float, float]
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    log_scale: tuple[float, float, float] = (0.0, 0.0, 0.0)
    opacity_logit: float = 0.0
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass(eq=False)
class GaussianScene:
    """Struct-of-arrays scene; row ``i`` of every array is primitive ``i``."""

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.rotations = np.array(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(self.colors, dtype=np.float64).reshape(n, 3)
        self.background = np.array(self.background, dtype=np.float64).reshape(3)

    @classmethod
    def from_primitives(cls, prims, background=(0.0, 0.0, 0.0)) -> GaussianScene:
        prims = list(prims)
        return cls(
            [p.mean for p in prims],
            [p.rotation for p in prims],
            [p.log_scale for p in prims],
            [p.opacity_logit for p in prims],
            [p.color for p in prims],
            background,
        )

    def __len__(self):
        return len(self.means)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            tuple(self.means[i]),
            tuple(self.rotations[i]),
            tuple(self.log_scales[i]),
            float(self.opacity_logits[i]),
            tuple(self.colors[i]),
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> GaussianScene:
        return GaussianScene(
            self.means.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
            self.background.copy(),
        )

    def subset(self, idx) -> GaussianScene:
        return GaussianScene(
            self.means[idx],
            self.rotations[idx],
            self.log_scales[idx],
            self.opacity_logits[idx],
            self.colors[idx],
            self.background.copy(),
        )

    def validate(self) -> None:
        if len(self) == 0:
            raise InvalidInputError("scene has no primitives")
        for name, _ in _FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"scene {name} contain non-finite values")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms == 0.0):
            raise InvalidInputError("scene contains a zero quaternion")
        if not np.all(np.isfinite(np.exp(self.log_scales))):
            raise InvalidInputError("scene scales overflow")

    def equals(self, other: GaussianScene) -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n, _ in _FIELDS) and np.array_equal(
            self.background, other.background
        )

    # ------------------------------------------------------------ serialization

    def to_bytes(self) -> bytes:
        n = len(self)
        rec = np.concatenate(
            [getattr(self, name).reshape(n, width) for name, width in _FIELDS], axis=1
        ).astype("<f4")
        header = MAGIC + struct.pack("<IQ3f", VERSION, n, *self.background)
        return header + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> GaussianScene:
        hdr = struct.calcsize("<IQ3f")
        if data[:4] != MAGIC:
            raise ParseError("not a scene container (bad magic)", 0)
        if len(data) < 4 + hdr:
            raise ParseError("truncated scene header", len(data))
        version, n, *bg = struct.unpack_from("<IQ3f", data, 4)
        if version != VERSION:
            raise ParseError(f"unsupported scene container version {version}", 4)
        body = 4 + hdr
        expected = body + n * _RECORD * 4
        if len(data) != expected:
            raise ParseError(f"scene container holds {len(data)} bytes, expected {expected}", min(len(data), expected))
        rec = np.frombuffer(data, dtype="<f4", offset=body).reshape(n, _RECORD).astype(np.float64)
        cols, start = {}, 0
        for name, width in _FIELDS:
            cols[name] = rec[:, start : start + width]
            start += width
        return cls(background=bg, **cols)

    def to_json(self) -> str:
        doc = {
            "version": VERSION,
            "background": self.background.tolist(),
            "primitives": [
                {
                    "mean": self.means[i].tolist(),
                    "rotation": self.rotations[i].tolist(),
                    "log_scale": self.log_scales[i].tolist(),
                    "opacity_logit": float(self.opacity_logits[i]),
                    "color": self.colors[i].tolist(),
                }
                for i in range(len(self))
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> GaussianScene:
        doc = json.loads(text)
        prims = [
            GaussianPrimitive(
                tuple(p["mean"]), tuple(p["rotation"]), tuple(p["log_scale"]), p["opacity_logit"], tuple(p["color"])
            )
            for p in doc["primitives"]
        ]
        if not prims:
            return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                       doc.get("background", [0, 0, 0]))
        return cls.from_primitives(prims, doc.get("background", [0, 0, 0]))


# ---------------------------------------------------------------- geometry


def normalized_rotations(quats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit quaternions and the norms they were divided by."""
    norms = np.linalg.norm(quats, axis=-1)
    return quats / norms[..., None], norms


def rotmats(unit_quats: np.ndarray) -> np.ndarray:
    w, x, y, z = (unit_quats[..., i] for i in range(4))
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def covariance_3d(g: GaussianPrimitive) -> np.ndarray:
    """``R S Sᵀ Rᵀ`` with ``S = diag(exp(log_scale))``."""
    q = np.asarray(g.rotation, dtype=np.float64)
    rot = quat_to_rotmat(q / np.linalg.norm(q))
    m = rot * np.exp(np.asarray(g.log_scale, dtype=np.float64))[None, :]
    return m @ m.T


class Projected(NamedTuple):
    """Per-primitive projection state for a whole scene (arrays of length N)."""

    unit_quats: np.ndarray
    quat_norms: np.ndarray
    rot: np.ndarray  # (N,3,3) primitive rotation
    scales: np.ndarray  # (N,3)
    cov3: np.ndarray  # (N,3,3)
    mean_cam: np.ndarray  # (N,3)
    T: np.ndarray  # (N,2,3) Jacobian times view rotation
    cov2: np.ndarray  # (N,2,2) dilated
    mean2d: np.ndarray  # (N,2)
    conic: np.ndarray  # (N,3) entries a, b, c of the inverse 2D covariance
    visible: np.ndarray  # (N,) bool
    culled: int
    singular: int


def _jacobian(mean_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    x, y, z = mean_cam[:, 0], mean_cam[:, 1], mean_cam[:, 2]
    J = np.zeros((len(mean_cam), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x / (z * z)
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * y / (z * z)
    return J


def project_scene(scene: GaussianScene, pose: CameraPose, intr: CameraIntrinsics, near: float = NEAR_PLANE) -> Projected:
    uq, qn = normalized_rotations(scene.rotations)
    rot = rotmats(uq)
    scales = np.exp(scene.log_scales)
    m3 = rot * scales[:, None, :]
    cov3 = m3 @ np.swapaxes(m3, 1, 2)
    W = pose.rotation_matrix
    mean_cam = scene.means @ W.T + pose.translation
    z = mean_cam[:, 2]
    in_front = z > near
    safe = mean_cam.copy()
    safe[~in_front, 2] = 1.0  # placeholder depth so culled rows stay finite
    T = _jacobian(safe, intr) @ W
    cov2 = T @ cov3 @ np.swapaxes(T, 1, 2)
    cov2[:, 0, 0] += DILATION
    cov2[:, 1, 1] += DILATION
    mean2d = np.stack(
        [intr.fx * safe[:, 0] / safe[:, 2] + intr.cx, intr.fy * safe[:, 1] / safe[:, 2] + intr.cy], -1
    )
    A, B, C = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = A * C - B * B
    nonsingular = det >= DET_MIN
    with np.errstate(divide="ignore", invalid="ignore"):
        conic = np.stack([C / det, -B / det, A / det], -1)
    rx = np.sqrt(MASS99 * np.maximum(A, 0.0))
    ry = np.sqrt(MASS99 * np.maximum(C, 0.0))
    u, v = mean2d[:, 0], mean2d[:, 1]
    on_image = (u + rx >= -0.5) & (u - rx <= intr.width - 0.5) & (v + ry >= -0.5) & (v - ry <= intr.height - 0.5)
    kept = in_front & on_image
    visible = kept & nonsingular
    return Projected(
        uq, qn, rot, scales, cov3, mean_cam, T, cov2, mean2d, conic, visible,
        culled=int(np.count_nonzero(~kept)), singular=int(np.count_nonzero(kept & ~nonsingular)),
    )


def depth_order(scene: GaussianScene, proj: Projected) -> np.ndarray:
    """Indices of visible primitives, front to back.

    Ties in depth are broken by the primitive parameters themselves so the order
    never depends on how the scene happens to be stored.
    """
    idx = np.flatnonzero(proj.visible)
    keys = [scene.colors[idx, k] for k in range(3)][::-1]
    keys += [scene.opacity_logits[idx]]
    keys += [scene.log_scales[idx, k] for k in range(3)][::-1]
    keys += [scene.rotations[idx, k] for k in range(4)][::-1]
    keys += [scene.means[idx, k] for k in range(3)][::-1]
    keys += [proj.mean_cam[idx, 2]]
    return idx[np.lexsort(keys)]


class Raster(NamedTuple):
    """Compositing state of one pixel chunk; rows are depth-sorted primitives."""

    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    alpha_raw: np.ndarray
    alpha: np.ndarray
    T: np.ndarray  # transmittance before each primitive
    included: np.ndarray
    weight: np.ndarray  # alpha * T on included entries, else 0
    T_final: np.ndarray  # (P,)
    color: np.ndarray  # (P,3)


def rasterize(mean2d, conic, opacity, colors, background, px, py) -> Raster:
    """Front-to-back compositing of pre-sorted 2D Gaussians at pixel centres ``(px, py)``."""
    dx = px[None, :] - mean2d[:, 0:1]
    dy = py[None, :] - mean2d[:, 1:2]
    a, b, c = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    gauss = np.exp(power)
    alpha_raw = opacity[:, None] * gauss
    alpha = np.minimum(alpha_raw, ALPHA_MAX)
    n, P = alpha.shape
    T_ext = np.ones((n + 1, P))
    np.cumprod(1.0 - alpha, axis=0, out=T_ext[1:])
    T = T_ext[:-1]
    included = T >= T_MIN
    weight = np.where(included, alpha * T, 0.0)
    T_final = T_ext[np.count_nonzero(included, axis=0), np.arange(P)]
    color = weight.T @ colors + T_final[:, None] * background[None, :]
    return Raster(dx, dy, gauss, alpha_raw, alpha, T, included, weight, T_final, color)


def pixel_chunks(width: int, height: int, n_prims: int):
    """Split the row-major pixel grid into contiguous ``(start, stop)`` chunks."""
    total = width * height
    size = max(width, CHUNK_BUDGET // max(n_prims, 1))
    return [(s, min(s + size, total)) for s in range(0, total, size)]


def pixel_coords(width: int, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
    flat = np.arange(start, stop)
    return (flat % width).astype(np.float64), (flat // width).astype(np.float64)


@dataclass
class RenderInfo:
    culled: int = 0
    singular: int = 0
    visible: int = 0


class SortedView(NamedTuple):
    """A scene projected into one camera, visible primitives in depth order."""

    proj: Projected
    order: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    background: np.ndarray
    width: int
    height: int


def prepare_view(scene: GaussianScene, pose: CameraPose, intr: CameraIntrinsics) -> SortedView:
    scene.validate()
    proj = project_scene(scene, pose, intr)
    order = depth_order(scene, proj)
    return SortedView(
        proj, order, proj.mean2d[order], proj.conic[order], sigmoid(scene.opacity_logits[order]),
        scene.colors[order], scene.background, intr.width, intr.height,
    )


def composite(view: SortedView, threads: int = 1, keep: bool = False):
    """Rasterize a prepared view; returns ``(flat_image, rasters)``.

    ``rasters`` holds the per-chunk compositing state when ``keep`` is set and
    the image fits a single chunk, else None.
    """
    W, H = view.width, view.height
    out = np.empty((W * H, 3))
    if len(view.order) == 0:
        out[:] = view.background
        return out, None
    chunks = pixel_chunks(W, H, len(view.order))
    kept = [None] * len(chunks)
    keep = keep and len(chunks) == 1

    def work(i):
        s, e = chunks[i]
        px, py = pixel_coords(W, s, e)
        r = rasterize(view.mean2d, view.conic, view.opacity, view.colors, view.background, px, py)
        out[s:e] = r.color
        if keep:
            kept[i] = r

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(chunks))))
    else:
        for i in range(len(chunks)):
            work(i)
    return out, (kept if keep else None)


def render(
    scene: GaussianScene,
    pose: CameraPose,
    intr: CameraIntrinsics,
    threads: int = 1,
    info: RenderInfo | None = None,
) -> np.ndarray:
    """Render ``scene`` seen from ``pose`` into an ``(H, W, 3)`` image in [0, 1].

    Pixels are independent, so ``threads`` only changes the wall-clock time:
    the output is bit-identical for any thread count. Pass a ``RenderInfo`` to
    collect culling and singular-covariance counts.
    """
    view = prepare_view(scene, pose, intr)
    if info is not None:
        info.culled, info.singular, info.visible = view.proj.culled, view.proj.singular, len(view.order)
    flat, _ = composite(view, threads)
    return np.clip(flat, 0.0, 1.0).reshape(intr.height, intr.width, 3)


def project_gaussian(g: GaussianPrimitive, pose: CameraPose, intr: CameraIntrinsics):
    """Project one primitive; returns ``(mean2d, cov2d, depth)`` or None when culled."""
    proj = project_scene(GaussianScene.from_primitives([g]), pose, intr)
    if not proj.visible[0]:
        return None
    return proj.mean2d[0].copy(), proj.cov2[0].copy(), float(proj.mean_cam[0, 2])
