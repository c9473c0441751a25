"""Crop grids, patch extraction, patch dropout and the model input strategies.

Images are ``H x W x C`` arrays with values in [0, 1]. Coordinates follow
image convention: ``x`` is the column offset, ``y`` the row offset, and sizes
are given as ``(width, height)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

SUPPORTED_N_CROPS = (5, 9, 16)
CENTER_CROP_FRACTION = 0.85
# Pixel statistics used to normalize model inputs; dropped patches are zeroed after this.
NORM_MEAN = 0.5
NORM_STD = 0.25


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class CropGrid:
    image_size: tuple[int, int]
    crop_size: tuple[int, int]
    n_crops: int
    offsets: tuple[tuple[int, int], ...]

    def rectangles(self) -> list[tuple[int, int, int, int]]:
        """``(x0, y0, x1, y1)`` half-open rectangles in canonical order."""
        w, h = self.crop_size
        return [(x, y, x + w, y + h) for x, y in self.offsets]


def _axis_offsets(extent: int, crop: int, side: int) -> list[int]:
    # round-half-up of i * (extent - crop) / (side - 1), in exact integer arithmetic
    span = extent - crop
    return [(2 * i * span + (side - 1)) // (2 * (side - 1)) for i in range(side)]


def make_grid(image_size: tuple[int, int], crop_size: int | tuple[int, int], n_crops: int) -> CropGrid:
    """Fixed crop layout: corners plus center for 5, an evenly spaced g x g grid for 9 and 16."""
    if isinstance(crop_size, int):
        crop_size = (crop_size, crop_size)
    img_w, img_h = image_size
    w, h = crop_size
    if n_crops not in SUPPORTED_N_CROPS:
        raise GridError(f"n_crops must be one of {SUPPORTED_N_CROPS}, got {n_crops}")
    if w > img_w or h > img_h or w <= 0 or h <= 0:
        raise GridError(f"crop {w}x{h} does not fit in image {img_w}x{img_h}")

    if n_crops == 5:
        right, bottom = img_w - w, img_h - h
        offsets = [(0, 0), (right, 0), (0, bottom), (right, bottom), ((img_w - w) // 2, (img_h - h) // 2)]
    else:
        side = int(round(n_crops**0.5))
        xs = _axis_offsets(img_w, w, side)
        ys = _axis_offsets(img_h, h, side)
        offsets = [(x, y) for y in ys for x in xs]

    if len(set(offsets)) != len(offsets):
        raise GridError(f"crop {w}x{h} on image {img_w}x{img_h} gives coinciding offsets for n_crops={n_crops}")
    return CropGrid((img_w, img_h), (w, h), n_crops, tuple(offsets))


@dataclass
class PatchBatch:
    """Patches of shape ``N_B x N_C x h x w x C`` with a keep-mask of shape ``N_B x N_C``."""

    data: torch.Tensor
    grid: CropGrid | None
    dropout_mask: np.ndarray

    @property
    def n_crops(self) -> int:
        return self.data.shape[1]


def extract_patches(image: np.ndarray, grid: CropGrid) -> PatchBatch:
    img_h, img_w = image.shape[:2]
    if (img_w, img_h) != grid.image_size:
        raise GridError(f"image is {img_w}x{img_h} but grid was built for {grid.image_size[0]}x{grid.image_size[1]}")
    patches = np.stack([image[y0:y1, x0:x1] for x0, y0, x1, y1 in grid.rectangles()])
    return PatchBatch(torch.from_numpy(np.ascontiguousarray(patches))[None], grid, np.ones((1, grid.n_crops), bool))


def extract_patches_batch(images: list[np.ndarray], grid: CropGrid) -> PatchBatch:
    return stack_batches([extract_patches(im, grid) for im in images])


def stack_batches(batches: list[PatchBatch]) -> PatchBatch:
    return PatchBatch(
        torch.cat([b.data for b in batches]),
        batches[0].grid,
        np.concatenate([b.dropout_mask for b in batches]),
    )


def patch_dropout(batch: PatchBatch, p_d: float, rng: np.random.Generator) -> PatchBatch:
    """Zero whole patches independently with probability ``p_d``.

    Draws are made sample by sample (``N_C`` uniforms, then one restore index
    if every patch was dropped), so dropping a stacked batch consumes the RNG
    exactly like dropping its samples one after another.
    """
    if not 0.0 <= p_d < 1.0:
        raise ValueError(f"p_d must lie in [0, 1), got {p_d}")
    n_b, n_c = batch.data.shape[:2]
    keep = batch.dropout_mask.copy()
    if p_d == 0.0:
        return replace(batch, dropout_mask=keep)
    for b in range(n_b):
        row = rng.random(n_c) >= p_d
        if not row.any():
            row[rng.integers(n_c)] = True
        keep[b] &= row
    mask = torch.from_numpy(keep).to(batch.data.dtype).reshape(n_b, n_c, *([1] * (batch.data.dim() - 2)))
    return replace(batch, data=batch.data * mask, dropout_mask=keep)


# ---------------------------------------------------------------------------
# Resizing and input strategies
# ---------------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` image to ``size = (width, height)``."""
    w, h = size
    if image.shape[1] == w and image.shape[0] == h:
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().astype(image.dtype, copy=False)


def center_crop_box(image_size: tuple[int, int], fraction: float = CENTER_CROP_FRACTION) -> tuple[int, int, int, int]:
    """``(x, y, w, h)`` of the centered rectangle covering ``fraction`` of each axis."""
    img_w, img_h = image_size
    w = int(np.floor(fraction * img_w))
    h = int(np.floor(fraction * img_h))
    return (img_w - w) // 2, (img_h - h) // 2, w, h


def strategy_downsample(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    return resize_bilinear(image, target)


def strategy_single_crop_eval(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    x, y, w, h = center_crop_box((image.shape[1], image.shape[0]))
    return resize_bilinear(image[y : y + h, x : x + w], target)


def strategy_single_crop_train(
    image: np.ndarray,
    target: tuple[int, int],
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.7, 1.1),
) -> np.ndarray:
    """Random-scale crop: a rectangle of ``s * 85%`` of each axis at a random position, resized to ``target``.

    At ``s = 1`` the crop has the same extent as the evaluation center crop.
    """
    img_h, img_w = image.shape[:2]
    s = rng.uniform(*scale_range)
    w = min(img_w, max(1, int(round(s * CENTER_CROP_FRACTION * img_w))))
    h = min(img_h, max(1, int(round(s * CENTER_CROP_FRACTION * img_h))))
    x = int(rng.integers(0, img_w - w + 1))
    y = int(rng.integers(0, img_h - h + 1))
    return resize_bilinear(image[y : y + h, x : x + w], target)


def strategy_random_crops_train(
    image: np.ndarray, crop_size: tuple[int, int], n: int, rng: np.random.Generator
) -> PatchBatch:
    img_h, img_w = image.shape[:2]
    w, h = crop_size
    if w > img_w or h > img_h:
        raise GridError(f"crop {w}x{h} does not fit in image {img_w}x{img_h}")
    xs = rng.integers(0, img_w - w + 1, size=n)
    ys = rng.integers(0, img_h - h + 1, size=n)
    patches = np.stack([image[y : y + h, x : x + w] for x, y in zip(xs, ys)])
    return PatchBatch(torch.from_numpy(np.ascontiguousarray(patches))[None], None, np.ones((1, n), bool))


def strategy_ordered(image: np.ndarray, grid: CropGrid) -> PatchBatch:
    return extract_patches(image, grid)


def normalize(x: torch.Tensor) -> torch.Tensor:
    return (x - NORM_MEAN) / NORM_STD


def average_predictions(per_patch_probs) -> np.ndarray:
    """Mean of per-patch probability vectors, shape ``[N_C, C] -> [C]``."""
    probs = np.asarray(per_patch_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("average_predictions needs a non-empty [N_C, C] array")
    return probs.mean(axis=0)
