"""Quantization-residual transform in YCbCr.

The residual of an image I is  I - Minv @ Round(M @ I)  applied per pixel,
where M / Minv are the fixed RGB<->YCbCr matrices below and Round simulates
integer quantization of the YCbCr values.  Real camera output survives this
round trip almost unchanged; synthesis pipelines leave structured traces.

Conventions fixed here for bit-exact tests:
* Round is half-away-from-zero, componentwise.
* No +128 chroma offset: Cb/Cr are signed, matching the matrices.
* Input stays in 0..255 units (no /255) because rounding only means
  anything at integer scale; the residual keeps those units too.

Per channel the residual is bounded by 0.5 * max abs row sum of Minv
= 0.5 * 2.772 = 1.386, and any integer gray pixel maps to an exactly
zero residual.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
], dtype=np.float64)

YCBCR_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
], dtype=np.float64)

# 0.5 * max_i sum_j |Minv[i, j]|
RESIDUAL_BOUND = 0.5 * float(np.abs(YCBCR_TO_RGB).sum(axis=1).max())


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero: 0.5 -> 1, -0.5 -> -1."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _check_range(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (3, 4) or img.shape[-1] != 3:
        raise InvalidInputError(
            f"expected HxWx3 image or NxHxWx3 batch, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 255.0:
        raise InvalidInputError("channel values must lie in [0, 255]")
    return img


def rgb_to_ycbcr(image: np.ndarray) -> np.ndarray:
    """Per-pixel M @ [R,G,B]; Cb/Cr are signed (no offset)."""
    img = _check_range(image)
    return img @ RGB_TO_YCBCR.T


def compute_residual(image: np.ndarray) -> np.ndarray:
    """I - Minv @ Round(M @ I), float64, same shape as the input."""
    img = _check_range(image)
    ycc = img @ RGB_TO_YCBCR.T
    return img - round_half_away(ycc) @ YCBCR_TO_RGB.T


def residual_to_uint16(res: np.ndarray) -> np.ndarray:
    """Map [-RESIDUAL_BOUND, +RESIDUAL_BOUND] linearly onto 0..65535."""
    scaled = (np.clip(res, -RESIDUAL_BOUND, RESIDUAL_BOUND) + RESIDUAL_BOUND) \
        / (2.0 * RESIDUAL_BOUND) * 65535.0
    return round_half_away(scaled).astype(np.uint16)


def write_residual_png(path, res: np.ndarray) -> None:
    """Write the residual as a 16-bit-per-channel RGB PNG."""
    import cv2

    arr = residual_to_uint16(res)
    ok = cv2.imwrite(str(path), arr[:, :, ::-1])  # cv2 wants BGR order
    if not ok:
        raise InvalidInputError(f"could not write {path}")


def read_residual_png(path) -> np.ndarray:
    """Read a 16-bit residual PNG back to float64 residual units."""
    import cv2

    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None or arr.dtype != np.uint16:
        raise InvalidInputError(f"not a 16-bit PNG: {path}")
    arr = arr[:, :, ::-1].astype(np.float64)
    return arr / 65535.0 * (2.0 * RESIDUAL_BOUND) - RESIDUAL_BOUND
