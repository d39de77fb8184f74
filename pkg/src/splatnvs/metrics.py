"""Image-quality metrics, their masked variants and the challenge score.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03 and a
dynamic range of 1. Only window centres whose window lies fully inside the
image are used, each channel is scored separately, and any window touching a
masked pixel is dropped.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, UndefinedMetricError

PSNR_CAP = 100.0
WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
SSIM_CHANNEL_MODE = "per-channel-mean"


def gaussian_kernel(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    k = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return g / g.sum()


_KERNEL = gaussian_kernel()


def _filter_valid(img: np.ndarray, k: np.ndarray = _KERNEL) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    out = sliding_window_view(img, len(k), axis=0) @ k
    return sliding_window_view(out, len(k), axis=1) @ k


def _filter_adjoint(grad: np.ndarray, k: np.ndarray = _KERNEL) -> np.ndarray:
    """Adjoint of ``_filter_valid``: scatter window gradients back to pixels."""
    r = len(k) - 1
    pad = [(r, r), (r, r)] + [(0, 0)] * (grad.ndim - 2)
    return _filter_valid(np.pad(grad, pad), k[::-1])


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")


def valid_windows(mask: np.ndarray | None, shape: tuple[int, int]) -> np.ndarray:
    """Bool map of window centres (valid region) whose window has no masked pixel."""
    h, w = shape
    if min(h, w) < WINDOW:
        raise InvalidInputError(f"SSIM needs images of at least {WINDOW}x{WINDOW}, got {w}x{h}")
    if mask is None:
        return np.ones((h - WINDOW + 1, w - WINDOW + 1), dtype=bool)
    box = np.ones(WINDOW)
    return _filter_valid(np.asarray(mask, dtype=np.float64), box) == 0.0


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak-1 PSNR in dB over unmasked pixels, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    sq = (a - b) ** 2
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool)
        if not keep.any():
            raise UndefinedMetricError("every pixel is masked; PSNR undefined")
        sq = sq[keep]
    mse = float(np.mean(sq))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_with_grad(x: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None, need_grad: bool = True):
    """Masked mean SSIM and, optionally, its gradient with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    valid = valid_windows(mask, x.shape[:2])
    nvalid = int(np.count_nonzero(valid))
    if nvalid == 0:
        raise UndefinedMetricError("no SSIM window free of masked pixels")
    nch = x.shape[2]

    mu_x, mu_y = _filter_valid(x), _filter_valid(y)
    exx, eyy, exy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    sxx = exx - mu_x * mu_x
    syy = eyy - mu_y * mu_y
    sxy = exy - mu_x * mu_y
    A1 = 2.0 * mu_x * mu_y + C1
    A2 = 2.0 * sxy + C2
    B1 = mu_x * mu_x + mu_y * mu_y + C1
    B2 = sxx + syy + C2
    smap = (A1 * A2) / (B1 * B2)
    vmask = valid[..., None]
    value = float(np.sum(np.where(vmask, smap, 0.0)) / (nvalid * nch))
    if not need_grad:
        return value, None

    dS = np.where(vmask, 1.0 / (nvalid * nch), 0.0)
    BB = B1 * B2
    g_mu = dS * (2.0 * mu_y * (A2 - A1) / BB + 2.0 * mu_x * smap * (1.0 / B2 - 1.0 / B1))
    g_exx = dS * (-smap / B2)
    g_exy = dS * (2.0 * A1 / BB)
    grad = _filter_adjoint(g_mu) + 2.0 * x * _filter_adjoint(g_exx) + y * _filter_adjoint(g_exy)
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    return ssim_with_grad(a, b, mask, need_grad=False)[0]


def challenge_score(psnr_db: float, ssim_value: float, lpips: float) -> float:
    """0.4 * PSNR/100 + 0.3 * SSIM + 0.3 * (1 - LPIPS), unclamped."""
    if not (0.0 <= lpips <= 1.0):
        raise InvalidInputError(f"LPIPS must lie in [0, 1], got {lpips}")
    return 0.4 * psnr_db / 100.0 + 0.3 * ssim_value + 0.3 * (1.0 - lpips)


def lpips_ingest(values: dict) -> dict[str, float]:
    out = {}
    for frame, v in values.items():
        try:
            f = float(v)
        except (TypeError, ValueError):
            raise InvalidInputError(f"LPIPS value for {frame!r} is not a number: {v!r}") from None
        if not (0.0 <= f <= 1.0):
            raise InvalidInputError(f"LPIPS value for {frame!r} outside [0, 1]: {f}")
        out[str(frame)] = f
    return out


@dataclass(frozen=True)
class MetricsRecord:
    psnr: float
    ssim: float
    lpips: float | None = None

    @property
    def score(self) -> float | None:
        if self.lpips is None:
            return None
        return challenge_score(self.psnr, self.ssim, self.lpips)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["score"] = self.score
        return d


def evaluate_frame(output: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None,
                   lpips: float | None = None) -> MetricsRecord:
    return MetricsRecord(psnr(output, gt, mask), ssim(output, gt, mask), lpips)


def aggregate(records: list[MetricsRecord]) -> MetricsRecord:
    """Arithmetic mean over frames; LPIPS (and so the score) only if every frame has it."""
    if not records:
        raise InvalidInputError("cannot aggregate zero frames")
    lp = [r.lpips for r in records]
    return MetricsRecord(
        float(np.mean([r.psnr for r in records])),
        float(np.mean([r.ssim for r in records])),
        None if any(v is None for v in lp) else float(np.mean(lp)),
    )
