"""End-to-end runs: fit, render the target views, enhance, and optionally refine
the scene on enhanced renders at poses interpolated toward each target."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import interpolate_poses
from .dataset import SceneDataset, SourceFrame
from .enhancer import LAMBDA_ROT, LAMBDA_TR, DEFAULT_TIMEOUT_S, make_enhancer, select_reference
from .errors import EnhancementError, InvalidInputError, SplatNVSError
from .fit import FitConfig, fit_detailed, init_from_pointcloud
from .images import write_image
from .metrics import SSIM_CHANNEL_MODE, MetricsRecord, aggregate, evaluate_frame
from .splat import GaussianScene, render

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    enhancer: str = "identity"
    enhancer_cmd: str | None = None
    enhancer_timeout: float = DEFAULT_TIMEOUT_S
    enhancer_fallback: bool = False
    refinement_steps: int = 0
    refine_iterations: int = 500
    # optimizer settings for refinement rounds; None reuses ``fit``
    refine_fit: FitConfig | None = None
    lambda_tr: float = LAMBDA_TR
    lambda_rot: float = LAMBDA_ROT
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.fit, dict):
            self.fit = FitConfig.from_dict(self.fit)
        if isinstance(self.refine_fit, dict):
            self.refine_fit = FitConfig.from_dict(self.refine_fit)
        if int(self.refinement_steps) != self.refinement_steps or self.refinement_steps < 0:
            raise InvalidInputError("refinement_steps must be a non-negative integer")
        if self.refinement_steps > 0 and self.refine_iterations < 1:
            raise InvalidInputError("refine_iterations must be >= 1 when refinement is enabled")
        if self.lambda_tr < 0 or self.lambda_rot < 0:
            raise InvalidInputError("pose-distance weights must be non-negative")

    def round_config(self, round_index: int) -> FitConfig:
        base = self.refine_fit or self.fit
        return replace(base, iterations=self.refine_iterations, seed=base.seed + round_index)

    def to_dict(self) -> dict:
        return {
            "fit": self.fit.to_dict(),
            "enhancer": self.enhancer,
            "enhancer_cmd": self.enhancer_cmd,
            "enhancer_timeout": self.enhancer_timeout,
            "enhancer_fallback": self.enhancer_fallback,
            "refinement_steps": self.refinement_steps,
            "refine_iterations": self.refine_iterations,
            "refine_fit": None if self.refine_fit is None else self.refine_fit.to_dict(),
            "lambda_tr": self.lambda_tr,
            "lambda_rot": self.lambda_rot,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PipelineResult:
    outputs: list[np.ndarray]
    renders: list[np.ndarray]
    references: list[int]
    scene: GaussianScene
    dataset: SceneDataset
    fit_loss: float


def _map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _render_and_enhance(scene, views, refs, originals, enhancer, threads, what):
    """Render ``views`` (pose, intrinsics) and enhance against source ``refs``."""

    def one(j):
        pose, intr = views[j]
        raw = render(scene, pose, intr)
        try:
            out = enhancer.enhance(raw, originals[refs[j]].image)
        except EnhancementError as exc:
            raise EnhancementError(f"{what} {j}: {exc}") from exc
        return raw, out

    pairs = _map(one, list(range(len(views))), threads)
    return [p[0] for p in pairs], [p[1] for p in pairs]


def run_pipeline(dataset: SceneDataset, config: PipelineConfig, init: GaussianScene | None = None) -> PipelineResult:
    """Full run; refinement happens when ``config.refinement_steps > 0``."""
    enhancer = make_enhancer(config.enhancer, config.enhancer_cmd, config.enhancer_timeout, config.enhancer_fallback)
    if init is None:
        init = init_from_pointcloud(dataset.point_cloud, config.fit)
    result = fit_detailed(dataset, init, config.fit)
    scene, loss = result.scene, result.best_loss

    originals = dataset.sources
    src_poses = [s.pose for s in originals]
    refs = [select_reference(src_poses, t.pose, config.lambda_tr, config.lambda_rot) for t in dataset.targets]

    augmented = dataset
    K = config.refinement_steps
    if K > 0 and dataset.M > 0:
        paths = [interpolate_poses(src_poses[refs[j]], t.pose, K) for j, t in enumerate(dataset.targets)]
        for k in range(K):
            views = [(paths[j][k], t.intrinsics) for j, t in enumerate(dataset.targets)]
            _, pseudo = _render_and_enhance(scene, views, refs, originals, enhancer, config.threads,
                                            f"refinement round {k + 1}, pseudo view")
            frames = [
                SourceFrame(img, views[j][0], views[j][1], None, f"pseudo_r{k + 1}_t{j}")
                for j, img in enumerate(pseudo)
            ]
            augmented = augmented.with_sources(frames)
            step = fit_detailed(augmented, scene, config.round_config(k + 1))
            scene, loss = step.scene, step.best_loss
            log.info("refinement round %d/%d: %d sources", k + 1, K, augmented.N)

    views = [(t.pose, t.intrinsics) for t in dataset.targets]
    renders, outputs = _render_and_enhance(scene, views, refs, originals, enhancer, config.threads, "target")
    return PipelineResult(outputs, renders, refs, scene, augmented, loss)


def run_basic(dataset: SceneDataset, config: PipelineConfig) -> list[np.ndarray]:
    return run_pipeline(dataset, replace(config, refinement_steps=0)).outputs


def run_iterative(dataset: SceneDataset, config: PipelineConfig) -> list[np.ndarray]:
    if config.refinement_steps == 0:
        return run_basic(dataset, config)
    return run_pipeline(dataset, config).outputs


def evaluate_run(outputs, groundtruth, masks=None, lpips=None) -> tuple[list[MetricsRecord], MetricsRecord]:
    """Per-frame metrics and their mean; ``lpips`` is a sequence aligned with the frames
    (entries may be None)."""
    if len(outputs) != len(groundtruth):
        raise InvalidInputError(f"{len(outputs)} outputs but {len(groundtruth)} ground-truth frames")
    n = len(outputs)
    masks = [None] * n if masks is None else list(masks)
    lpips = [None] * n if lpips is None else list(lpips)
    if len(masks) != n or len(lpips) != n:
        raise InvalidInputError("masks / LPIPS values must align with the outputs")
    records = [evaluate_frame(o, g, m, lp) for o, g, m, lp in zip(outputs, groundtruth, masks, lpips)]
    return records, aggregate(records)


def metrics_report(records: list[MetricsRecord], agg: MetricsRecord, names: list[str]) -> dict:
    return {
        "frames": {name: r.to_dict() for name, r in zip(names, records)},
        "aggregate": agg.to_dict(),
        "meta": {"ssim_channels": SSIM_CHANNEL_MODE, "psnr_cap_db": 100.0},
    }


def write_artifacts(result: PipelineResult, out_dir, run_info: dict) -> None:
    """Write ``target_<j>.png``, ``render_<j>.png``, ``metrics.json`` and ``run.json``.

    ``metrics.json`` scores the fitted scene on the original source views, since
    target views carry no ground truth.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for j, (raw, enh) in enumerate(zip(result.renders, result.outputs)):
        write_image(out / f"render_{j}.png", raw)
        write_image(out / f"target_{j}.png", enh)
    n_orig = run_info.get("sources", result.dataset.N)
    originals = result.dataset.sources[:n_orig]
    try:
        renders = [render(result.scene, s.pose, s.intrinsics) for s in originals]
        records, agg = evaluate_run(renders, [s.image for s in originals], [s.mask for s in originals])
        report = metrics_report(records, agg, [s.name for s in originals])
    except SplatNVSError as exc:
        report = {"error": str(exc)}
    report["fit_loss"] = None if not np.isfinite(result.fit_loss) else result.fit_loss
    report["references"] = {f"target_{j}": r for j, r in enumerate(result.references)}
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "run.json").write_text(json.dumps(run_info, indent=2, sort_keys=True) + "\n")
