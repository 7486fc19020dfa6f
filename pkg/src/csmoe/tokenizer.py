"""Patch tokenization, per-modality random masking, and tile splitting.

All functions are pure; an image is a [C, H, W] array (or constant Tensor)
and a token sequence is [P, patch^2 * C] with tokens in raster-scan order
and each token flattened channel-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .numerics import Tensor


@dataclass(frozen=True)
class PatchSet:
    """Flattened non-overlapping patches of one image."""

    tokens: Tensor  # [P, patch_size**2 * channels]
    patch_size: int
    grid: tuple  # (rows, cols)
    channels: int

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class MaskPair:
    """Complementary masked / unmasked index sets over ``{0..P-1}``."""

    masked: np.ndarray
    unmasked: np.ndarray
    ratio: float
    seed: int


@dataclass(frozen=True)
class TileSplitReport:
    tile_shape: tuple  # (C, H, W)
    patch_shape: tuple  # (patch, patch)
    kept: int
    discarded_small: int  # partial edge cells, never emitted
    discarded_invalid: int

    def to_dict(self) -> dict:
        return {
            "tile_shape": list(self.tile_shape),
            "patch_shape": list(self.patch_shape),
            "kept": self.kept,
            "discarded_small": self.discarded_small,
            "discarded_invalid": self.discarded_invalid,
        }


def _as_array(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError(f"expected a [C, H, W] image, got shape {arr.shape}")
    return arr


def patchify(image, patch_size: int) -> PatchSet:
    """Cut a [C, H, W] image into the raster-scan sequence of its
    patch_size x patch_size blocks."""
    arr = _as_array(image)
    c, h, w = arr.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(
            f"image sides {(h, w)} are not multiples of patch size {patch_size}"
        )
    rows, cols = h // patch_size, w // patch_size
    blocks = (
        arr.reshape(c, rows, patch_size, cols, patch_size)
        .transpose(1, 3, 0, 2, 4)
        .reshape(rows * cols, c * patch_size * patch_size)
    )
    return PatchSet(Tensor(blocks), patch_size, (rows, cols), c)


def unpatchify(patches: PatchSet) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    rows, cols = patches.grid
    p, c = patches.patch_size, patches.channels
    tok = patches.tokens.data
    return (
        tok.reshape(rows, cols, c, p, p)
        .transpose(2, 0, 3, 1, 4)
        .reshape(c, rows * p, cols * p)
    )


def tokens_to_image(tokens: np.ndarray, patch_size: int, grid, channels: int) -> np.ndarray:
    """Reassemble a [P, patch^2*C] token array (e.g. a reconstruction)."""
    ps = PatchSet(Tensor(tokens), patch_size, tuple(grid), channels)
    return unpatchify(ps)


def sample_masks(num_patches: int, ratio: float, seed: int) -> MaskPair:
    """A uniformly random masked subset of round-half-up(ratio * P) indices."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"mask ratio must be in (0, 1), got {ratio}")
    count = int(math.floor(ratio * num_patches + 0.5))
    perm = np.random.default_rng(seed).permutation(num_patches)
    return MaskPair(
        masked=np.sort(perm[:count]),
        unmasked=np.sort(perm[count:]),
        ratio=ratio,
        seed=seed,
    )


def _sincos_table(positions: np.ndarray, dim: int) -> np.ndarray:
    # dim is even; half sines, half cosines over a geometric frequency ladder
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    args = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def positional_embedding(grid, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos table, [rows*cols, dim]; row half + column half."""
    if dim % 4:
        raise ParameterError(f"positional embedding dim must be divisible by 4, got {dim}")
    rows, cols = grid
    r_idx = np.repeat(np.arange(rows), cols)
    c_idx = np.tile(np.arange(cols), rows)
    return np.concatenate(
        [_sincos_table(r_idx, dim // 2), _sincos_table(c_idx, dim // 2)], axis=1
    )


def split_tile(tile, patch_size: int, invalid_sentinel: float = np.nan):
    """Cut a tile into full patch_size cells, dropping any cell that touches a
    sentinel-valued pixel in any band. Edge remainders are never emitted.

    Returns (patches, TileSplitReport); patches are [C, p, p] arrays in
    raster-scan order of the kept cells.
    """
    if patch_size < 1:
        raise ParameterError(f"patch size must be >= 1, got {patch_size}")
    arr = _as_array(tile)
    c, h, w = arr.shape
    rows, cols = h // patch_size, w // patch_size
    small = math.ceil(h / patch_size) * math.ceil(w / patch_size) - rows * cols
    if np.isnan(invalid_sentinel):
        def is_invalid(block):
            return bool(np.isnan(block).any())
    else:
        def is_invalid(block):
            return bool((block == invalid_sentinel).any())
    kept, invalid = [], 0
    for r in range(rows):
        for q in range(cols):
            block = arr[:, r * patch_size:(r + 1) * patch_size, q * patch_size:(q + 1) * patch_size]
            if is_invalid(block):
                invalid += 1
            else:
                kept.append(block.copy())
    report = TileSplitReport(
        tile_shape=(c, h, w),
        patch_shape=(patch_size, patch_size),
        kept=len(kept),
        discarded_small=small,
        discarded_invalid=invalid,
    )
    return kept, report
