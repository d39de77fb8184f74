"""Fitting a Gaussian scene to posed images.

The backward pass is hand-derived reverse-mode differentiation through the
renderer in :mod:`splatnvs.splat`: compositing, the 2D Gaussian falloff,
conic inversion, the EWA projection, covariance construction and the
sigmoid/exp parameterizations. Depth order is treated as constant.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics, CameraPose
from .colmap import PointCloud
from .dataset import SceneDataset
from .errors import InvalidInputError, NumericalFailureError, UndefinedLossError, UndefinedMetricError
from .metrics import ssim_with_grad
from .splat import (
    ALPHA_MAX,
    GaussianScene,
    SortedView,
    composite,
    logit,
    pixel_chunks,
    pixel_coords,
    prepare_view,
    rasterize,
    rotmats,
    sigmoid,
)

log = logging.getLogger(__name__)

INIT_OPACITY = 0.1
SCALE_MIN, SCALE_MAX = 1e-4, 10.0
LONELY_POINT_SCALE = 0.1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
PARAM_GROUPS = ("means", "rotations", "log_scales", "opacity_logits", "colors")


@dataclass
class FitConfig:
    iterations: int = 2000
    lambda_ssim: float = 0.2
    lr_means: float = 1.6e-4  # multiplied by the scene extent
    lr_rotations: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity_logits: float = 5e-2
    lr_colors: float = 2.5e-3
    densify: bool = False
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_from: int = 500
    densify_until_fraction: float = 0.5
    split_extent_fraction: float = 0.01
    prune_opacity: float = 0.005
    seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise InvalidInputError("iterations must be a non-negative integer")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise InvalidInputError("lambda_ssim must lie in [0, 1]")
        for g in PARAM_GROUPS:
            if self.lr(g) < 0:
                raise InvalidInputError(f"learning rate for {g} must be >= 0")
        self.background = tuple(float(v) for v in self.background)

    def lr(self, group: str) -> float:
        return getattr(self, f"lr_{group}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FitConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class GradientBuffer:
    """Loss partials aligned with the scene's primitive order."""

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    # screen-space mean gradient norm in NDC units, 0 for culled primitives
    mean2d_norm: np.ndarray = field(default=None)
    visible: np.ndarray = field(default=None)

    @classmethod
    def zeros(cls, n: int) -> GradientBuffer:
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(n, dtype=bool))

    def __len__(self):
        return len(self.means)


# ---------------------------------------------------------------- initialization


def knn_scales(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance from each point to its ``k`` nearest neighbours, clamped."""
    n = len(points)
    if n == 1:
        return np.array([LONELY_POINT_SCALE])
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    dist = np.asarray(dist).reshape(n, kk + 1)[:, 1:]
    return np.clip(dist.mean(axis=1), SCALE_MIN, SCALE_MAX)


def init_from_pointcloud(pc: PointCloud, config: FitConfig | None = None) -> GaussianScene:
    """One isotropic primitive per point, sized by its 3-nearest-neighbour spacing."""
    if len(pc) == 0:
        raise InvalidInputError("cannot initialize a scene from an empty point cloud")
    config = config or FitConfig()
    n = len(pc)
    log_scale = np.log(knn_scales(pc.positions))
    return GaussianScene(
        pc.positions.copy(),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.repeat(log_scale[:, None], 3, axis=1),
        np.full(n, logit(INIT_OPACITY)),
        pc.colors.copy(),
        config.background,
    )


# ---------------------------------------------------------------- loss


def _loss_and_grad(pred, gt, mask, lambda_ssim, need_grad=True):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    keep = np.ones(pred.shape[:2], dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    if keep.shape != pred.shape[:2]:
        raise InvalidInputError(f"mask shape {keep.shape} does not match image {pred.shape[:2]}")
    count = int(np.count_nonzero(keep))
    if count == 0:
        raise UndefinedLossError("every pixel is masked; loss undefined")
    diff = np.where(keep[..., None], pred - gt, 0.0)
    denom = count * pred.shape[2]
    l1 = float(np.sum(np.abs(diff)) / denom)
    loss = (1.0 - lambda_ssim) * l1
    grad = (1.0 - lambda_ssim) * np.sign(diff) / denom if need_grad else None
    if lambda_ssim > 0.0:
        try:
            s, gs = ssim_with_grad(pred, gt, None if mask is None else ~keep, need_grad)
        except (UndefinedMetricError, InvalidInputError) as exc:
            raise UndefinedLossError(f"SSIM term undefined: {exc}") from exc
        loss += lambda_ssim * (1.0 - s)
        if need_grad:
            grad = grad - lambda_ssim * gs
    return loss, grad


def photometric_loss(pred, gt, mask=None, lambda_ssim: float = 0.2) -> float:
    """``(1 - λ)·L1 + λ·(1 - SSIM)`` over unmasked pixels."""
    return _loss_and_grad(pred, gt, mask, lambda_ssim, need_grad=False)[0]


# ---------------------------------------------------------------- backward


def _quat_rotmat_vjp(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull a rotation-matrix gradient back onto unit-quaternion components."""
    w, x, y, z = (q[:, i] for i in range(4))
    g = lambda r, c: gR[:, r, c]  # noqa: E731
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    gy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    gz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([gw, gx, gy, gz], -1)


def image_backward(scene: GaussianScene, pose: CameraPose, intr: CameraIntrinsics,
                   grad_image: np.ndarray, view: SortedView | None = None,
                   rasters: list | None = None) -> GradientBuffer:
    """Vector-Jacobian product of :func:`splatnvs.splat.render` with ``grad_image``.

    ``view`` and ``rasters`` let a caller that just rendered the same view skip
    recomputing the forward state.
    """
    n = len(scene)
    if view is None:
        view = prepare_view(scene, pose, intr)
    proj, order = view.proj, view.order
    grads = GradientBuffer.zeros(n)
    if len(order) == 0:
        return grads
    W_img, H_img = intr.width, intr.height
    mean2d, conic, opac, cols, bg = view.mean2d, view.conic, view.opacity, view.colors, view.background
    gimg = np.asarray(grad_image, dtype=np.float64).reshape(-1, 3)

    k = len(order)
    g_col = np.zeros((k, 3))
    g_opac = np.zeros(k)
    g_m2 = np.zeros((k, 2))
    g_con = np.zeros((k, 3))
    a, b, c = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
    for i, (s, e) in enumerate(pixel_chunks(W_img, H_img, k)):
        if rasters is not None:
            r = rasters[i]
        else:
            px, py = pixel_coords(W_img, s, e)
            r = rasterize(mean2d, conic, opac, cols, bg, px, py)
        g = gimg[s:e]
        g_col += r.weight @ g
        cg = cols @ g.T  # colour . dL/dC per entry
        wcg = r.weight * cg
        # light reaching the pixel from behind each primitive, weighted by dL/dC
        behind = np.cumsum(wcg[::-1], axis=0)[::-1] - wcg + (r.T_final * (g @ bg))[None, :]
        g_alpha = np.where(r.included & (r.alpha_raw < ALPHA_MAX), r.T * cg - behind / (1.0 - r.alpha), 0.0)
        g_opac += np.sum(g_alpha * r.gauss, axis=1)
        g_pow = g_alpha * r.alpha_raw
        gx, gy = g_pow * r.dx, g_pow * r.dy
        sxx, sxy, syy = np.sum(gx * r.dx, axis=1), np.sum(gx * r.dy, axis=1), np.sum(gy * r.dy, axis=1)
        sx, sy = np.sum(gx, axis=1), np.sum(gy, axis=1)
        g_m2[:, 0] += a[:, 0] * sx + b[:, 0] * sy
        g_m2[:, 1] += b[:, 0] * sx + c[:, 0] * sy
        g_con[:, 0] += -0.5 * sxx
        g_con[:, 1] += -sxy
        g_con[:, 2] += -0.5 * syy

    # conic -> dilated 2D covariance
    Q = np.zeros((k, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    GQ = np.zeros((k, 2, 2))
    GQ[:, 0, 0], GQ[:, 1, 1] = g_con[:, 0], g_con[:, 2]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_con[:, 1]
    G2 = -Q @ GQ @ Q

    # 2D covariance -> 3D covariance and projection matrix T = J W
    T = proj.T[order]
    cov3 = proj.cov3[order]
    G3 = np.swapaxes(T, 1, 2) @ G2 @ T
    GT = 2.0 * G2 @ T @ cov3
    Wv = pose.rotation_matrix
    GJ = GT @ Wv.T

    # camera-space mean, via mean2d and the Jacobian
    mc = proj.mean_cam[order]
    x, y, z = mc[:, 0], mc[:, 1], mc[:, 2]
    fx, fy = intr.fx, intr.fy
    z2, z3 = z * z, z * z * z
    g_cam = np.zeros((k, 3))
    g_cam[:, 0] = g_m2[:, 0] * fx / z - GJ[:, 0, 2] * fx / z2
    g_cam[:, 1] = g_m2[:, 1] * fy / z - GJ[:, 1, 2] * fy / z2
    g_cam[:, 2] = (
        -g_m2[:, 0] * fx * x / z2 - g_m2[:, 1] * fy * y / z2
        - GJ[:, 0, 0] * fx / z2 + GJ[:, 0, 2] * 2 * fx * x / z3
        - GJ[:, 1, 1] * fy / z2 + GJ[:, 1, 2] * 2 * fy * y / z3
    )
    g_mean = g_cam @ Wv

    # 3D covariance -> rotation and log-scale
    rot, scales = proj.rot[order], proj.scales[order]
    M3 = rot * scales[:, None, :]
    GM3 = 2.0 * G3 @ M3
    GR = GM3 * scales[:, None, :]
    g_scale = np.sum(GM3 * rot, axis=1)
    uq, qn = proj.unit_quats[order], proj.quat_norms[order]
    g_uq = _quat_rotmat_vjp(uq, GR)
    g_q = (g_uq - uq * np.sum(uq * g_uq, axis=1, keepdims=True)) / qn[:, None]

    grads.means[order] = g_mean
    grads.rotations[order] = g_q
    grads.log_scales[order] = g_scale * scales
    grads.opacity_logits[order] = g_opac * opac * (1.0 - opac)
    grads.colors[order] = g_col
    grads.mean2d_norm[order] = np.hypot(g_m2[:, 0] * 0.5 * W_img, g_m2[:, 1] * 0.5 * H_img)
    grads.visible[order] = True
    return grads


def _check_finite(grads: GradientBuffer) -> None:
    bad = np.zeros(len(grads), dtype=bool)
    for name in PARAM_GROUPS:
        arr = getattr(grads, name)
        bad |= ~np.isfinite(arr.reshape(len(grads), -1)).all(axis=1)
    if bad.any():
        raise NumericalFailureError("non-finite gradient", primitive=int(np.flatnonzero(bad)[0]))


def backward(scene: GaussianScene, pose: CameraPose, intr: CameraIntrinsics, gt: np.ndarray,
             mask: np.ndarray | None = None, lambda_ssim: float = 0.2) -> tuple[float, GradientBuffer]:
    """Loss of the rendered view against ``gt`` and its gradient for every primitive parameter."""
    view = prepare_view(scene, pose, intr)
    flat, rasters = composite(view, keep=True)
    pred = np.clip(flat, 0.0, 1.0).reshape(intr.height, intr.width, 3)
    loss, gimg = _loss_and_grad(pred, gt, mask, lambda_ssim)
    grads = image_backward(scene, pose, intr, gimg, view, rasters)
    _check_finite(grads)
    return loss, grads


# ---------------------------------------------------------------- optimization


class Adam:
    """Per-group Adam with bias correction over a scene's parameter arrays."""

    def __init__(self, scene: GaussianScene, lrs: dict[str, float], betas=ADAM_BETAS, eps=ADAM_EPS):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {g: np.zeros_like(getattr(scene, g)) for g in PARAM_GROUPS}
        self.v = {g: np.zeros_like(getattr(scene, g)) for g in PARAM_GROUPS}

    def step(self, scene: GaussianScene, grads: GradientBuffer) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for g in PARAM_GROUPS:
            lr = self.lrs[g]
            grad = getattr(grads, g)
            self.m[g] = self.b1 * self.m[g] + (1.0 - self.b1) * grad
            self.v[g] = self.b2 * self.v[g] + (1.0 - self.b2) * grad * grad
            if lr == 0.0:
                continue
            update = lr * (self.m[g] / c1) / (np.sqrt(self.v[g] / c2) + self.eps)
            setattr(scene, g, getattr(scene, g) - update)
        if self.lrs["rotations"] != 0.0:
            scene.rotations = scene.rotations / np.linalg.norm(scene.rotations, axis=1, keepdims=True)
        if self.lrs["colors"] != 0.0:
            np.clip(scene.colors, 0.0, 1.0, out=scene.colors)

    def remap(self, parents: np.ndarray, fresh: np.ndarray) -> None:
        """Follow a densify/prune step: row ``i`` inherits state of ``parents[i]``,
        rows flagged ``fresh`` start from zero."""
        for state in (self.m, self.v):
            for g in PARAM_GROUPS:
                arr = state[g][parents].copy()
                arr[fresh] = 0.0
                state[g] = arr


def scene_extent(dataset: SceneDataset, scene: GaussianScene | None = None) -> float:
    """1.1 x the largest camera-centre distance from the camera centroid.

    Falls back to the spread of the primitive means (or 1) for a single camera.
    """
    centers = np.array([s.pose.center for s in dataset.sources])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    if radius < 1e-9 and scene is not None and len(scene):
        radius = float(np.max(np.linalg.norm(scene.means - scene.means.mean(axis=0), axis=1)))
    if radius < 1e-9:
        radius = 1.0
    return 1.1 * radius


def _densify_plan(scene: GaussianScene, grads_ema: np.ndarray, config: FitConfig, extent: float):
    n = len(scene)
    scales = np.exp(scene.log_scales)
    max_scale = scales.max(axis=1)
    hot = grads_ema > config.densify_grad_threshold
    small = max_scale <= config.split_extent_fraction * extent
    clone = hot & small
    split = hot & ~small

    parents = [np.arange(n)[~split]]
    fresh = [np.zeros(n - int(split.sum()), dtype=bool)]
    means = [scene.means[~split]]
    log_scales = [scene.log_scales[~split]]

    ci = np.flatnonzero(clone)
    parents.append(ci)
    fresh.append(np.ones(len(ci), dtype=bool))
    means.append(scene.means[ci])
    log_scales.append(scene.log_scales[ci])

    si = np.flatnonzero(split)
    if len(si):
        rot = rotmats(scene.rotations[si] / np.linalg.norm(scene.rotations[si], axis=1, keepdims=True))
        major = np.argmax(scales[si], axis=1)
        offset = rot[np.arange(len(si)), :, major] * scales[si, major][:, None]
        child_ls = scene.log_scales[si] - math.log(1.6)
        for sign in (1.0, -1.0):
            parents.append(si)
            fresh.append(np.ones(len(si), dtype=bool))
            means.append(scene.means[si] + sign * offset)
            log_scales.append(child_ls)

    parents = np.concatenate(parents)
    fresh = np.concatenate(fresh)
    new = GaussianScene(
        np.concatenate(means),
        scene.rotations[parents],
        np.concatenate(log_scales),
        scene.opacity_logits[parents],
        scene.colors[parents],
        scene.background,
    )
    keep = sigmoid(new.opacity_logits) >= config.prune_opacity
    if not keep.any():
        keep[int(np.argmax(new.opacity_logits))] = True
    return new.subset(keep), parents[keep], fresh[keep]


def densify_and_prune(scene: GaussianScene, grads_ema: np.ndarray, config: FitConfig,
                      extent: float | None = None) -> GaussianScene:
    """Clone small / split large primitives whose screen-space gradient EMA exceeds the
    threshold, then drop primitives below the opacity floor."""
    if extent is None:
        extent = 1.1 * float(np.max(np.linalg.norm(scene.means - scene.means.mean(axis=0), axis=1)) or 1.0)
    return _densify_plan(scene, np.asarray(grads_ema), config, extent)[0]


def _epoch_orders(n: int, seed: int):
    rng = np.random.default_rng(seed)
    while True:
        yield from rng.permutation(n)


@dataclass
class FitResult:
    scene: GaussianScene
    best_loss: float
    best_iteration: int
    losses: list[float]


def fit_detailed(dataset: SceneDataset, init: GaussianScene, config: FitConfig) -> FitResult:
    if dataset.N < 1:
        raise InvalidInputError("fitting needs at least one source frame")
    init.validate()
    scene = init.copy()
    if config.iterations == 0:
        return FitResult(scene, math.inf, 0, [])
    extent = scene_extent(dataset, scene)
    lrs = {g: config.lr(g) for g in PARAM_GROUPS}
    lrs["means"] *= extent
    opt = Adam(scene, lrs)
    frames = _epoch_orders(dataset.N, config.seed)
    ema = np.zeros(len(scene))
    densify_until = int(config.densify_until_fraction * config.iterations)

    losses: list[float] = []
    best = (math.inf, 0, scene.copy())
    window = dataset.N
    for it in range(1, config.iterations + 1):
        src = dataset.sources[next(frames)]
        try:
            loss, grads = backward(scene, src.pose, src.intrinsics, src.image, src.mask, config.lambda_ssim)
        except NumericalFailureError as exc:
            raise NumericalFailureError(str(exc), exc.primitive, it) from exc
        losses.append(loss)
        opt.step(scene, grads)
        if config.densify:
            ema = np.where(grads.visible, 0.9 * ema + 0.1 * grads.mean2d_norm, ema)
            if config.densify_from <= it <= densify_until and it % config.densify_interval == 0:
                scene, parents, fresh = _densify_plan(scene, ema, config, extent)
                opt.remap(parents, fresh)
                ema = np.zeros(len(scene))
                log.debug("iteration %d: densified to %d primitives", it, len(scene))
        if it % window == 0 or it == config.iterations:
            running = float(np.mean(losses[-window:]))
            if running < best[0]:
                best = (running, it, scene.copy())
    return FitResult(best[2], best[0], best[1], losses)


def fit(dataset: SceneDataset, init: GaussianScene, config: FitConfig) -> GaussianScene:
    """Optimize ``init`` against the dataset's source frames.

    Each step takes one source frame (a seeded shuffle visiting every frame once
    per epoch) and applies one Adam update per parameter group. The scene kept
    is the one with the lowest epoch-mean training loss.
    """
    return fit_detailed(dataset, init, config).scene


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, scene: GaussianScene, *, iteration: int, loss: float, config: FitConfig) -> None:
    path = Path(path)
    path.write_bytes(scene.to_bytes())
    sidecar = {
        "iteration": iteration,
        "loss": None if not math.isfinite(loss) else loss,
        "config_hash": config.digest(),
        "seed": config.seed,
        "primitives": len(scene),
    }
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> GaussianScene:
    return GaussianScene.from_bytes(Path(path).read_bytes())
