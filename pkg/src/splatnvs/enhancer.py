"""Post-render enhancement: reference-frame selection and enhancer plug-ins.

An enhancer maps ``(render, reference) -> image`` where all three are
``(H, W, 3)`` float images in [0, 1] and the output has the render's shape.
Besides two built-in classical plug-ins, any executable honouring::

    <cmd> --render <in.png> --reference <ref.png> --out <out.png>

can be used (exit 0, 8-bit PNG of the render's size written to ``--out``).
"""

from __future__ import annotations

import logging
import os
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .camera import CameraPose, pose_distance
from .errors import EnhancementError, InvalidInputError, LoadError
from .images import check_image, read_image, write_image

log = logging.getLogger(__name__)

LAMBDA_TR = 1.0
LAMBDA_ROT = 10.0
DEFAULT_TIMEOUT_S = 120.0
TIMEOUT_ENV = "SPLATNVS_TIMEOUT_S"
SIGMA_FLOOR = 1e-6


def select_reference(sources: Sequence[CameraPose], target: CameraPose,
                     lambda_tr: float = LAMBDA_TR, lambda_rot: float = LAMBDA_ROT) -> int:
    """Index of the source pose nearest to ``target``; ties go to the lowest index."""
    if len(sources) == 0:
        raise InvalidInputError("reference selection needs at least one source pose")
    best, best_d = 0, pose_distance(sources[0], target, lambda_tr, lambda_rot)
    for i in range(1, len(sources)):
        d = pose_distance(sources[i], target, lambda_tr, lambda_rot)
        if d < best_d:
            best, best_d = i, d
    return best


class EnhancerPlugin(Protocol):
    name: str

    def enhance(self, render: np.ndarray, reference: np.ndarray) -> np.ndarray: ...


def enhance_identity(render: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return render


def enhance_color_match(render: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Match each channel's mean and standard deviation to the reference's."""
    render = np.asarray(render, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    mu_r = render.mean(axis=(0, 1))
    sd_r = render.std(axis=(0, 1))
    mu_ref = reference.mean(axis=(0, 1))
    sd_ref = reference.std(axis=(0, 1))
    gain = np.where(sd_r < SIGMA_FLOOR, 1.0, sd_ref / np.maximum(sd_r, SIGMA_FLOOR))
    return np.clip((render - mu_r) * gain + mu_ref, 0.0, 1.0)


def _timeout(default: float) -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise InvalidInputError(f"{TIMEOUT_ENV}={raw!r} is not a number") from None


def enhance_external(render: np.ndarray, reference: np.ndarray, command_spec: str | Sequence[str],
                     timeout: float = DEFAULT_TIMEOUT_S) -> np.ndarray:
    """Run an external enhancer through temporary PNG files."""
    cmd = shlex.split(command_spec) if isinstance(command_spec, str) else list(command_spec)
    if not cmd:
        raise InvalidInputError("external enhancer command is empty")
    render = check_image(render, "render")
    with tempfile.TemporaryDirectory(prefix="splatnvs-enh-") as tmp:
        tmp = Path(tmp)
        src, ref, out = tmp / "render.png", tmp / "reference.png", tmp / "out.png"
        write_image(src, render)
        write_image(ref, reference)
        limit = _timeout(timeout)
        try:
            proc = subprocess.run(
                [*cmd, "--render", str(src), "--reference", str(ref), "--out", str(out)],
                capture_output=True, timeout=limit, check=False,
            )
        except subprocess.TimeoutExpired:
            raise EnhancementError(f"external enhancer timed out after {limit:g} s") from None
        except OSError as exc:
            raise EnhancementError(f"cannot launch external enhancer {cmd[0]!r}: {exc}") from None
        if proc.returncode != 0:
            tail = proc.stderr.decode(errors="replace").strip()[-500:]
            raise EnhancementError(f"external enhancer exited with status {proc.returncode}: {tail}")
        try:
            result = read_image(out)
        except LoadError as exc:
            raise EnhancementError(f"external enhancer output unreadable: {exc}") from None
    if result.shape != render.shape:
        raise EnhancementError(f"external enhancer returned {result.shape}, expected {render.shape}")
    return result


class IdentityEnhancer:
    name = "identity"

    def enhance(self, render, reference):
        return enhance_identity(render, reference)


class ColorMatchEnhancer:
    name = "color-match"

    def enhance(self, render, reference):
        return enhance_color_match(render, reference)


class ExternalEnhancer:
    name = "external"

    def __init__(self, command: str | Sequence[str], timeout: float = DEFAULT_TIMEOUT_S, fallback: bool = False):
        self.command = command
        self.timeout = timeout
        self.fallback = fallback

    def enhance(self, render, reference):
        try:
            return enhance_external(render, reference, self.command, self.timeout)
        except EnhancementError as exc:
            if not self.fallback:
                raise
            log.warning("enhancer failed, passing render through: %s", exc)
            return render


def make_enhancer(name: str, command: str | Sequence[str] | None = None, timeout: float = DEFAULT_TIMEOUT_S,
                  fallback: bool = False) -> EnhancerPlugin:
    if name == "identity":
        return IdentityEnhancer()
    if name == "color-match":
        return ColorMatchEnhancer()
    if name == "external":
        if not command:
            raise InvalidInputError("the external enhancer needs a command")
        return ExternalEnhancer(command, timeout, fallback)
    raise InvalidInputError(f"unknown enhancer {name!r}; choose identity, color-match or external")
