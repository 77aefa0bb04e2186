"""
Imaging service - image and label-map IO plus deterministic randomness.

This service provides:
- Loading rasters as normalized ImageGrids (PNG 8/16-bit, PGM/PPM)
- Multi-modal stacks from aligned single-channel files
- Label maps from integer rasters or CSV grids
- Saving images and label maps
- RandomSource, a splittable seeded generator
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from skimage.color import rgb2gray

from spmatch.adapters import filesystem
from spmatch.domain.errors import DomainError, FormatError
from spmatch.domain.types import ImageGrid, LabelMap

logger = logging.getLogger(__name__)


class RandomSource:
    """Seeded, splittable random source.

    Every substream is keyed by a tuple of non-negative integers, e.g.
    (search index, superpixel index). Equal seeds and keys give equal streams;
    distinct keys give statistically independent, non-overlapping streams.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def substream(self, *key: int) -> np.random.Generator:
        """Return the generator for one key."""
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed})"


# ============================================================================
# Loading
# ============================================================================


def load_image(path: str | Path) -> ImageGrid:
    """
    Load a raster as an ImageGrid normalized to [0, 1].

    Args:
        path: PNG (8 or 16-bit), PGM or PPM file

    Returns:
        ImageGrid with the file's channel count

    Raises:
        ImageIOError: Unreadable or truncated file
        FormatError: Unsupported format
    """
    path = Path(path)
    array, max_value = filesystem.read_raster(path)
    data = array.astype(np.float64) / float(max_value)
    grid = ImageGrid(np.clip(data, 0.0, 1.0))
    logger.debug("Loaded %s: %dx%dx%d", path, grid.width, grid.height, grid.channels)
    return grid


def load_image_stack(paths: Sequence[str | Path]) -> ImageGrid:
    """
    Load aligned single-channel files as one multi-channel ImageGrid.

    A single path is loaded as-is (keeping its channels).

    Raises:
        DomainError: Empty list, multi-channel member or size mismatch
    """
    if not paths:
        raise DomainError("Image stack needs at least one path")
    if len(paths) == 1:
        return load_image(paths[0])

    channels = []
    for p in paths:
        grid = load_image(p)
        if grid.channels != 1:
            raise DomainError(f"Stack member {p} has {grid.channels} channels, expected 1")
        if channels and grid.shape != channels[0].shape[:2]:
            raise DomainError(f"Stack member {p} is {grid.shape}, expected {channels[0].shape[:2]}")
        channels.append(grid.data[:, :, 0])
    return ImageGrid(np.stack(channels, axis=-1))


def load_labelmap_pixelwise(path: str | Path) -> LabelMap:
    """
    Load a label map with labels as stored (no remapping).

    Args:
        path: 16-bit (or 8-bit) single-channel PNG, PGM or CSV grid

    Raises:
        FormatError: Non-integer values, multi-channel raster or unsupported format
        DomainError: Negative labels
        ImageIOError: Unreadable file
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in filesystem.LABEL_SUFFIXES:
        raise FormatError(f"Unsupported label map format: {suffix or '(none)'} ({path})")

    if suffix == ".csv":
        labels = filesystem.read_csv_grid(path)
    else:
        labels, _ = filesystem.read_raster(path)
        if labels.ndim != 2:
            raise FormatError(f"Label map {path} must be single-channel")

    if labels.min() < 0:
        raise DomainError(f"Negative labels in {path}")
    return LabelMap(labels)


# ============================================================================
# Saving
# ============================================================================


def save_image(grid: ImageGrid, path: str | Path) -> None:
    """Save an ImageGrid as an 8-bit PNG (gray for 1 channel, RGB for 3)."""
    path = Path(path)
    if grid.channels not in (1, 3):
        raise DomainError(f"Only 1- or 3-channel grids can be saved, got {grid.channels}")
    array = np.round(grid.data * 255.0).astype(np.uint8)
    filesystem.write_png(path, array[:, :, 0] if grid.channels == 1 else array)


def save_labelmap(labelmap: LabelMap, path: str | Path) -> None:
    """Save a label map as 16-bit PNG or CSV (chosen by extension)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        filesystem.write_csv_grid(path, labelmap.labels)
    elif suffix == ".png":
        filesystem.write_png(path, labelmap.labels)
    else:
        raise FormatError(f"Unsupported label map format: {suffix or '(none)'} ({path})")


# ============================================================================
# Color handling
# ============================================================================


def to_color_space(grid: ImageGrid, color: str) -> ImageGrid:
    """
    Convert to the feature color space.

    "rgb" keeps the grid unchanged; "gray" reduces 3-channel grids to luminance.
    Other channel counts (gray, multi-modal stacks) pass through.
    """
    if color == "rgb" or grid.channels != 3:
        return grid
    if color == "gray":
        return ImageGrid(np.clip(rgb2gray(grid.data), 0.0, 1.0))
    raise DomainError(f"Unknown color space: {color}")


def luminance(grid: ImageGrid) -> np.ndarray:
    """(h, w) luminance; RGB through rgb2gray, other stacks by channel mean."""
    if grid.channels == 3:
        return np.asarray(rgb2gray(grid.data), dtype=np.float64)
    return grid.data.mean(axis=2)
