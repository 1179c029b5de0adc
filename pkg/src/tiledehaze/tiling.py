"""Deterministic tiling of large images into fixed-size patches.

An image is reflect-padded up to the next multiple of the patch size on
each axis and cut into a row-major grid. The layout records the pads so
reassembly is an exact inverse: ``reassemble(*partition(img, p)) == img``
bit for bit.

The core operates on torch tensors so the same code path stays
differentiable inside the model; the public functions accept and return
:class:`~tiledehaze.image.ImageTensor`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError
from .image import ImageTensor


@dataclass(frozen=True)
class TileLayout:
    """How an image was padded and partitioned; enables exact reassembly."""

    original_height: int
    original_width: int
    patch_size: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if self.pad_top + self.pad_bottom >= self.patch_size or self.pad_left + self.pad_right >= self.patch_size:
            raise DataError("total padding per axis must be smaller than the patch size")
        if self.original_height + self.pad_top + self.pad_bottom != self.grid_rows * self.patch_size:
            raise DataError("padded height does not equal grid_rows * patch_size")
        if self.original_width + self.pad_left + self.pad_right != self.grid_cols * self.patch_size:
            raise DataError("padded width does not equal grid_cols * patch_size")

    @property
    def padded_height(self) -> int:
        return self.grid_rows * self.patch_size

    @property
    def padded_width(self) -> int:
        return self.grid_cols * self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class PatchBatch:
    """Row-major stack of square patches, shape (N, p, p, C).

    Backed either by a torch tensor (differentiable path) or a host numpy
    array (inference path: patches stay in host memory and are uploaded to
    the device one mini-batch at a time).
    """

    patches: "torch.Tensor | np.ndarray"

    def __post_init__(self):
        if self.patches.ndim != 4:
            raise DataError(f"patches must be (N, p, p, C), got shape {tuple(self.patches.shape)}")
        if self.patches.shape[1] != self.patches.shape[2]:
            raise DataError("patches must be square")

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    @property
    def channels(self) -> int:
        return self.patches.shape[3]

    def chunk_to(self, lo: int, hi: int, device, dtype) -> torch.Tensor:
        """Upload patches [lo, hi) to the compute device."""
        buf = self.patches
        if isinstance(buf, np.ndarray):
            return torch.from_numpy(buf[lo:hi]).to(device=device, dtype=dtype)
        return buf[lo:hi].to(device=device, dtype=dtype)


def reflect_pad_2d(x: torch.Tensor, pads: tuple[int, int, int, int]) -> torch.Tensor:
    """Reflect-pad (left, right, top, bottom) on an (H, W, C) tensor.

    torch rejects a reflect pad wider than the axis; applying it in
    instalments reflects back and forth the way ``np.pad`` does, so small
    images still pad up to a full patch. A singleton axis has nothing to
    reflect, so it replicates.
    """
    left, right, top, bottom = pads
    x = x.permute(2, 0, 1).unsqueeze(0)  # (1, C, H, W)
    while left or right or top or bottom:
        h, w = x.shape[2], x.shape[3]
        if w == 1 and (left or right):
            x = torch.nn.functional.pad(x, (left, right, 0, 0), mode="replicate")
            left = right = 0
            continue
        if h == 1 and (top or bottom):
            x = torch.nn.functional.pad(x, (0, 0, top, bottom), mode="replicate")
            top = bottom = 0
            continue
        l = min(left, w - 1)
        r = min(right, w - 1)
        t = min(top, h - 1)
        b = min(bottom, h - 1)
        x = torch.nn.functional.pad(x, (l, r, t, b), mode="reflect")
        left, right, top, bottom = left - l, right - r, top - t, bottom - b
    return x.squeeze(0).permute(1, 2, 0)


def reflect_pad_2d_np(x: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    """Numpy twin of :func:`reflect_pad_2d` with identical installment
    semantics, used on the host-side inference path."""
    left, right, top, bottom = pads
    while left or right or top or bottom:
        h, w = x.shape[0], x.shape[1]
        if w == 1 and (left or right):
            x = np.pad(x, ((0, 0), (left, right), (0, 0)), mode="edge")
            left = right = 0
            continue
        if h == 1 and (top or bottom):
            x = np.pad(x, ((top, bottom), (0, 0), (0, 0)), mode="edge")
            top = bottom = 0
            continue
        l = min(left, w - 1)
        r = min(right, w - 1)
        t = min(top, h - 1)
        b = min(bottom, h - 1)
        x = np.pad(x, ((t, b), (l, r), (0, 0)), mode="reflect")
        left, right, top, bottom = left - l, right - r, top - t, bottom - b
    return x


def compute_layout(height: int, width: int, patch_size: int) -> TileLayout:
    """Pad/grid bookkeeping for an image of the given size."""
    if patch_size < 16:
        raise DataError(f"patch_size must be >= 16, got {patch_size}")
    if height < 1 or width < 1:
        raise DataError(f"image dimensions must be >= 1, got {height}x{width}")
    if patch_size > 4 * max(height, width):
        raise DataError(
            f"degenerate tiling: patch_size {patch_size} exceeds 4x the larger "
            f"image dimension ({height}x{width})"
        )
    grid_rows = -(-height // patch_size)
    grid_cols = -(-width // patch_size)
    pad_h = grid_rows * patch_size - height
    pad_w = grid_cols * patch_size - width
    return TileLayout(
        original_height=height,
        original_width=width,
        patch_size=patch_size,
        pad_top=pad_h // 2,
        pad_bottom=pad_h - pad_h // 2,
        pad_left=pad_w // 2,
        pad_right=pad_w - pad_w // 2,
        grid_rows=grid_rows,
        grid_cols=grid_cols,
    )


def partition_tensor(x: torch.Tensor, patch_size: int) -> tuple[torch.Tensor, TileLayout]:
    """Differentiable core of :func:`partition` on an (H, W, C) tensor."""
    if x.ndim != 3:
        raise DataError(f"expected (H, W, C) tensor, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise DataError("image contains non-finite values")
    h, w, c = x.shape
    layout = compute_layout(h, w, patch_size)
    padded = reflect_pad_2d(x, (layout.pad_left, layout.pad_right, layout.pad_top, layout.pad_bottom))
    p = patch_size
    grid = padded.reshape(layout.grid_rows, p, layout.grid_cols, p, c)
    patches = grid.permute(0, 2, 1, 3, 4).reshape(layout.num_patches, p, p, c)
    return patches, layout


def reassemble_tensor(patches: torch.Tensor, layout: TileLayout) -> torch.Tensor:
    """Differentiable core of :func:`reassemble`; returns (H, W, C)."""
    n, p1, p2, c = patches.shape
    if n != layout.num_patches:
        raise DataError(f"patch count {n} does not match layout ({layout.num_patches})")
    if p1 != layout.patch_size or p2 != layout.patch_size:
        raise DataError(f"patch size {p1}x{p2} does not match layout ({layout.patch_size})")
    p = layout.patch_size
    grid = patches.reshape(layout.grid_rows, layout.grid_cols, p, p, c)
    full = grid.permute(0, 2, 1, 3, 4).reshape(layout.padded_height, layout.padded_width, c)
    return full[
        layout.pad_top : layout.pad_top + layout.original_height,
        layout.pad_left : layout.pad_left + layout.original_width,
    ]


def partition_array(x: np.ndarray, patch_size: int) -> tuple[np.ndarray, TileLayout]:
    """Host-side core of :func:`partition` on an (H, W, C) array."""
    if x.ndim != 3:
        raise DataError(f"expected (H, W, C) array, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("image contains non-finite values")
    h, w, c = x.shape
    layout = compute_layout(h, w, patch_size)
    padded = reflect_pad_2d_np(x, (layout.pad_left, layout.pad_right, layout.pad_top, layout.pad_bottom))
    p = patch_size
    grid = padded.reshape(layout.grid_rows, p, layout.grid_cols, p, c)
    patches = np.ascontiguousarray(grid.transpose(0, 2, 1, 3, 4)).reshape(layout.num_patches, p, p, c)
    return patches, layout


def reassemble_array(patches: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Host-side core of :func:`reassemble`; returns (H, W, C)."""
    n, p1, p2, c = patches.shape
    if n != layout.num_patches:
        raise DataError(f"patch count {n} does not match layout ({layout.num_patches})")
    if p1 != layout.patch_size or p2 != layout.patch_size:
        raise DataError(f"patch size {p1}x{p2} does not match layout ({layout.patch_size})")
    p = layout.patch_size
    grid = patches.reshape(layout.grid_rows, layout.grid_cols, p, p, c)
    full = np.ascontiguousarray(grid.transpose(0, 2, 1, 3, 4)).reshape(
        layout.padded_height, layout.padded_width, c)
    return full[
        layout.pad_top : layout.pad_top + layout.original_height,
        layout.pad_left : layout.pad_left + layout.original_width,
    ]


def partition(image: ImageTensor, patch_size: int) -> tuple[PatchBatch, TileLayout]:
    """Cut an image into a row-major grid of patch_size squares.

    The image is reflect-padded to the next multiple of patch_size on each
    axis; the returned layout records the pads exactly. Patches stay in
    host memory.
    """
    patches, layout = partition_array(image.data, patch_size)
    return PatchBatch(patches), layout


def reassemble(patches: PatchBatch, layout: TileLayout) -> ImageTensor:
    """Exact inverse of :func:`partition` for the same layout."""
    if patches.channels not in (1, 3):
        raise DataError(f"channel count must be 1 or 3, got {patches.channels}")
    buf = patches.patches
    if isinstance(buf, torch.Tensor):
        buf = buf.detach().cpu().numpy()
    full = reassemble_array(buf, layout)
    return ImageTensor(np.ascontiguousarray(full.astype(np.float32, copy=False)))
