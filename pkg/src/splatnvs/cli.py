"""``splatnvs`` command line: inspect, fit, render, run, eval.

Exit codes: 0 success, 1 usage or input error, 2 numerical/runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .colmap import parse_cameras, summarize
from .dataset import intrinsics_from_json, load_dataset, pose_from_json
from .errors import InvalidInputError, LoadError, ParseError, SplatNVSError
from .fit import fit_detailed, init_from_pointcloud, load_checkpoint, save_checkpoint
from .images import read_image, read_mask, write_image
from .metrics import lpips_ingest
from .pipeline import PipelineConfig, evaluate_run, metrics_report, run_pipeline, write_artifacts
from .splat import render

log = logging.getLogger("splatnvs")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2
IMAGE_SUFFIXES = (".png", ".ppm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _guard_file(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise UsageError(f"{path} exists; pass --overwrite to replace it")


def _guard_dir(path: Path, overwrite: bool) -> None:
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise UsageError(f"{path} is not empty; pass --overwrite to replace its contents")
    path.mkdir(parents=True, exist_ok=True)


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        try:
            cfg = PipelineConfig.from_dict(json.loads(Path(args.config).read_text()))
        except FileNotFoundError:
            raise UsageError(f"config not found: {args.config}") from None
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from None
    fit = cfg.fit
    if getattr(args, "seed", None) is not None:
        fit = replace(fit, seed=args.seed)
    if getattr(args, "iterations", None) is not None:
        fit = replace(fit, iterations=args.iterations)
    cfg = replace(cfg, fit=fit)
    if getattr(args, "k_refine", None) is not None:
        cfg = replace(cfg, refinement_steps=args.k_refine)
    if getattr(args, "enhancer", None) is not None:
        cfg = replace(cfg, enhancer=args.enhancer)
    if getattr(args, "enhancer_cmd", None) is not None:
        cfg = replace(cfg, enhancer_cmd=args.enhancer_cmd)
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _dataset(args):
    return load_dataset(args.manifest, max_points=args.max_points, downscale=args.downscale,
                        seed=args.seed or 0, threads=args.threads or 1)


# ---------------------------------------------------------------- commands


def cmd_inspect(args) -> int:
    summary = summarize(args.colmap_dir)
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        print(f"cameras: {summary['cameras']}")
        print(f"images:  {summary['images']}")
        print(f"points:  {summary['points']}")
        if summary["points"]:
            print(f"bbox:    {summary['bbox_min']} .. {summary['bbox_max']}")
        print(f"mean track length: {summary['mean_track_length']:.3f}")
    if args.out:
        out = Path(args.out)
        _guard_file(out, args.overwrite)
        out.write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def cmd_fit(args) -> int:
    out = Path(args.out)
    _guard_file(out, args.overwrite)
    cfg = _load_config(args)
    ds = _dataset(args)
    init = init_from_pointcloud(ds.point_cloud, cfg.fit)
    res = fit_detailed(ds, init, cfg.fit)
    save_checkpoint(out, res.scene, iteration=res.best_iteration, loss=res.best_loss, config=cfg.fit)
    log.info("wrote %s (%d primitives)", out, len(res.scene))
    return EXIT_OK


def _read_views(path: Path, colmap_dir: str | None):
    doc = json.loads(path.read_text())
    entries = doc["views"] if isinstance(doc, dict) else doc
    cams = None
    views = []
    for j, e in enumerate(entries):
        pose = pose_from_json(e["pose"])
        if "intrinsics" in e:
            intr = intrinsics_from_json(e["intrinsics"])
        else:
            if cams is None:
                if not colmap_dir:
                    raise UsageError(f"view {j} gives a camera_id; pass --colmap-dir to resolve it")
                d = Path(colmap_dir)
                src = d / "cameras.bin"
                cams = parse_cameras(src.read_bytes() if src.exists() else (d / "cameras.txt").read_text())
            if e.get("camera_id") not in cams:
                raise UsageError(f"view {j}: unknown camera id {e.get('camera_id')}")
            intr = cams[e["camera_id"]]
        views.append((pose, intr))
    return views


def cmd_render(args) -> int:
    try:
        scene = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    views = _read_views(Path(args.poses), args.colmap_dir)
    out = Path(args.out)
    _guard_dir(out, args.overwrite)
    for j, (pose, intr) in enumerate(views):
        write_image(out / f"view_{j:04d}.png", render(scene, pose, intr, threads=args.threads or 1))
    return EXIT_OK


def cmd_run(args) -> int:
    out = Path(args.out)
    _guard_dir(out, args.overwrite)
    started = _now()
    cfg = _load_config(args)
    ds = _dataset(args)
    result = run_pipeline(ds, cfg)
    (out / "scene.gspl").write_bytes(result.scene.to_bytes())
    # the worker count never changes results, so it stays out of the record
    config = cfg.to_dict()
    config.pop("threads")
    run_info = {
        "tool_version": __version__,
        "manifest": str(args.manifest),
        "config": config,
        "seed": cfg.fit.seed,
        "downscale": args.downscale,
        "max_points": args.max_points,
        "sources": ds.N,
        "targets": ds.M,
        "path": "iterative" if cfg.refinement_steps > 0 else "basic",
        "timestamps": {"started": started, "finished": _now()},
    }
    write_artifacts(result, out, run_info)
    return EXIT_OK


def _image_files(d: Path) -> list[Path]:
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_eval(args) -> int:
    outputs = _image_files(Path(args.outputs))
    gt_dir = Path(args.gt)
    gts = _image_files(gt_dir)
    if len(outputs) != len(gts):
        raise UsageError(f"{len(outputs)} output frames but {len(gts)} ground-truth frames")
    names = [p.name for p in outputs]
    missing = [n for n in names if not (gt_dir / n).exists()]
    if missing:
        raise UsageError(f"no ground truth for {missing[:5]}")
    masks = None
    if args.masks_dir:
        md = Path(args.masks_dir)
        masks = [read_mask(md / n) if (md / n).exists() else None for n in names]
    lpips = None
    if args.lpips_file:
        values = lpips_ingest(json.loads(Path(args.lpips_file).read_text()))
        lpips = [values.get(n) for n in names]
    records, agg = evaluate_run(
        [read_image(p) for p in outputs], [read_image(gt_dir / n) for n in names], masks, lpips
    )
    report = metrics_report(records, agg, names)
    out = Path(args.out) if args.out else Path(args.outputs) / "metrics.json"
    _guard_file(out, args.overwrite)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    a = agg
    score = "n/a" if a.score is None else f"{a.score:.4f}"
    print(f"frames={len(records)} PSNR={a.psnr:.3f} SSIM={a.ssim:.4f} LPIPS={a.lpips} score={score}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatnvs", description="Gaussian-splat novel view synthesis with a pluggable enhancer.")
    p.add_argument("--version", action="version", version=f"splatnvs {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--overwrite", action="store_true")
        sp.add_argument("--threads", type=int, default=1)

    def data(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--downscale", type=int, default=1)
        sp.add_argument("--max-points", type=int, default=0, help="uniform random point-cloud subsample (0 = all)")

    sp = sub.add_parser("inspect", help="summarize a COLMAP reconstruction")
    sp.add_argument("colmap_dir")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--out")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("fit", help="fit a scene and write a checkpoint")
    data(sp)
    common(sp, "checkpoint path")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("render", help="render a checkpoint at the given poses")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--poses", required=True, help="JSON list of {pose, intrinsics | camera_id}")
    sp.add_argument("--colmap-dir")
    common(sp, "output directory")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("run", help="fit, render targets, enhance")
    data(sp)
    common(sp, "artifacts directory")
    sp.add_argument("--k-refine", type=int)
    sp.add_argument("--enhancer", choices=("identity", "color-match", "external"))
    sp.add_argument("--enhancer-cmd")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="score outputs against ground truth")
    sp.add_argument("--outputs", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--masks-dir")
    sp.add_argument("--lpips-file")
    sp.add_argument("--out")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidInputError, LoadError, ParseError, FileNotFoundError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"splatnvs: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SplatNVSError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"splatnvs: failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
