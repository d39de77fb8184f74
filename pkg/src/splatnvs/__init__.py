"""Hybrid novel-view synthesis: Gaussian-splat fitting, target rendering,
reference-guided enhancement and challenge-score evaluation."""

from .camera import CameraIntrinsics, CameraPose, interpolate_poses, pose_distance, project_point
from .colmap import PointCloud, parse_cameras, parse_images, parse_points3d
from .dataset import SceneDataset, SourceFrame, TargetView, load_dataset
from .errors import (
    EnhancementError,
    InvalidInputError,
    LoadError,
    NumericalFailureError,
    ParseError,
    SplatNVSError,
    UndefinedLossError,
    UndefinedMetricError,
    UnsupportedModelError,
)
from .fit import FitConfig, backward, fit, init_from_pointcloud, photometric_loss
from .metrics import MetricsRecord, challenge_score, psnr, ssim
from .splat import GaussianPrimitive, GaussianScene, render

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "CameraPose", "interpolate_poses", "pose_distance", "project_point",
    "PointCloud", "parse_cameras", "parse_images", "parse_points3d",
    "SceneDataset", "SourceFrame", "TargetView", "load_dataset",
    "EnhancementError", "InvalidInputError", "LoadError", "NumericalFailureError", "ParseError",
    "SplatNVSError", "UndefinedLossError", "UndefinedMetricError", "UnsupportedModelError",
    "FitConfig", "backward", "fit", "init_from_pointcloud", "photometric_loss",
    "MetricsRecord", "challenge_score", "psnr", "ssim",
    "GaussianPrimitive", "GaussianScene", "render",
]
