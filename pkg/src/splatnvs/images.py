"""Image and mask I/O.

Images are float64 arrays of shape ``(H, W, 3)`` with values in [0, 1];
masks are bool arrays of shape ``(H, W)`` where True marks a dynamic object
to exclude from losses and metrics.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError, LoadError

MASK_THRESHOLD = 128
_EIGHT_BIT_MODES = {"L", "RGB", "RGBA", "P", "1", "LA"}


def check_image(img: np.ndarray, what: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError(f"{what} must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise InvalidInputError(f"{what} values must lie in [0, 1]")
    return img


def check_mask(mask: np.ndarray | None, shape: tuple[int, int], what: str = "mask") -> np.ndarray:
    if mask is None:
        return np.zeros(shape, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise InvalidInputError(f"{what} has shape {mask.shape}, expected {tuple(shape)}")
    return mask.astype(bool, copy=False)


def quantize(img: np.ndarray) -> np.ndarray:
    """Float image -> uint8 by round-to-nearest with clamping."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def _open(path: Path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError:
        raise LoadError(f"image not found: {path}") from None
    except OSError as exc:
        raise LoadError(f"cannot decode image {path}: {exc}") from None
    if im.mode not in _EIGHT_BIT_MODES:
        raise LoadError(f"unsupported bit depth / mode {im.mode!r} in {path}; only 8-bit images")
    return im


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM as an ``(H, W, 3)`` float image."""
    im = _open(Path(path))
    return dequantize(np.asarray(im.convert("RGB")))


def write_image(path, img: np.ndarray) -> None:
    """Write an image as 8-bit RGB; the format follows the suffix (``.png`` or ``.ppm``)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".png", ".ppm"):
        raise InvalidInputError(f"unsupported output format {suffix!r}")
    arr = quantize(check_image(img))
    Image.fromarray(arr).save(path, format="PNG" if suffix == ".png" else "PPM")


def read_mask(path) -> np.ndarray:
    """Read a single-channel 8-bit mask; pixels >= 128 are dynamic."""
    im = _open(Path(path))
    return np.asarray(im.convert("L")) >= MASK_THRESHOLD


def write_mask(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr).save(Path(path), format="PNG")


def downscale_image(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downsample by an integer factor (trailing rows/cols are cropped)."""
    if factor == 1:
        return img
    h, w = img.shape[0] // factor, img.shape[1] // factor
    crop = img[: h * factor, : w * factor]
    return crop.reshape(h, factor, w, factor, -1).mean(axis=(1, 3))


def downscale_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """A downsampled pixel is dynamic if any source pixel in its block is."""
    if factor == 1:
        return mask
    h, w = mask.shape[0] // factor, mask.shape[1] // factor
    crop = mask[: h * factor, : w * factor]
    return crop.reshape(h, factor, w, factor).any(axis=(1, 3))
