"""In-memory image format and file I/O.

Every image in this package is a dense float32 array of shape (H, W, C)
with intensities in [0, 1] and C in {1, 3}. PNG and TIFF files at 8 or
16 bits per sample are mapped linearly onto that range on load; saving
inverse-maps with round-half-to-even before quantizing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_PNG_EXTS = {".png"}
_TIFF_EXTS = {".tif", ".tiff"}


@dataclass(frozen=True)
class ImageTensor:
    """Dense (H, W, C) float32 image with unit-normalized intensities."""

    data: np.ndarray

    def __post_init__(self):
        arr = self.data
        if not isinstance(arr, np.ndarray) or arr.ndim != 3:
            raise DataError(f"image data must be a 3-d array (H, W, C), got {getattr(arr, 'shape', None)}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise DataError(f"image dimensions must be >= 1, got {h}x{w}")
        if c not in (1, 3):
            raise DataError(f"channel count must be 1 or 3, got {c}")
        if arr.dtype != np.float32:
            raise DataError(f"image data must be float32, got {arr.dtype}")
        if not np.isfinite(arr).all():
            raise DataError("image contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"intensities must lie in [0, 1], got range [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_array(cls, arr: np.ndarray, clamp: bool = False) -> "ImageTensor":
        """Build from any float array; (H, W) is promoted to one channel.

        With clamp=True, values are clipped into [0, 1] instead of rejected.
        """
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if clamp:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(np.ascontiguousarray(arr))


def load_image(path: str | os.PathLike) -> ImageTensor:
    """Read an 8- or 16-bit PNG/TIFF and map intensities linearly to [0, 1]."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext in _TIFF_EXTS:
        import tifffile

        raw = tifffile.imread(str(path))
    elif ext in _PNG_EXTS:
        import cv2

        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise DataError(f"cannot read image {path}")
        if raw.ndim == 3 and raw.shape[2] >= 3:
            raw = np.ascontiguousarray(raw[:, :, [2, 1, 0]])  # BGR -> RGB, drop alpha
    else:
        raise DataError(f"unsupported image extension {ext!r} (expected PNG or TIFF)")

    raw = np.asarray(raw)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.ndim != 3:
        raise DataError(f"cannot interpret image of shape {raw.shape} from {path}")
    if raw.shape[2] == 4:  # drop alpha
        raw = raw[:, :, :3]
    if raw.shape[2] == 2:  # gray + alpha
        raw = raw[:, :, :1]

    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DataError(f"unsupported sample dtype {raw.dtype} in {path} (expected uint8/uint16)")
    return ImageTensor((raw.astype(np.float32) / scale).copy())


def save_image(image: ImageTensor, path: str | os.PathLike, bit_depth: int = 8) -> None:
    """Write PNG/TIFF at the requested bit depth.

    Quantization uses round-half-to-even so save/load round trips are
    reproducible across platforms.
    """
    if bit_depth == 8:
        scale, dtype = 255.0, np.uint8
    elif bit_depth == 16:
        scale, dtype = 65535.0, np.uint16
    else:
        raise DataError(f"bit_depth must be 8 or 16, got {bit_depth}")

    quant = np.round(image.data * scale).astype(dtype)  # np.round is half-to-even
    if quant.shape[2] == 1:
        quant = quant[:, :, 0]

    ext = os.path.splitext(str(path))[1].lower()
    if ext in _TIFF_EXTS:
        import tifffile

        tifffile.imwrite(str(path), quant)
    elif ext in _PNG_EXTS:
        import cv2

        if quant.ndim == 3:
            quant = np.ascontiguousarray(quant[:, :, ::-1])  # RGB -> BGR
        if not cv2.imwrite(str(path), quant):
            raise DataError(f"cannot write image {path}")
    else:
        raise DataError(f"unsupported image extension {ext!r} (expected PNG or TIFF)")
