"""
Experiments - synthetic data and end-to-end matching/labeling drivers.

These drivers back the slow acceptance tests and can be run by hand:
- Decomposition robustness: one image decomposed twice, matched with and
  without superpatch context (median displacement)
- Shear: an image matched to its sheared copy (residual after affine removal)
- Feature comparison: color only vs color + texture descriptors
- Labeling accuracy versus superpatch radius on a 3-class shape dataset, with a
  train/test split or leave-one-out over the samples
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from spmatch.domain.errors import DomainError
from spmatch.domain.models import FeatureConfig, FusionParams, SpmParams
from spmatch.domain.types import Decomposition, ImageGrid, LabelMap
from spmatch.services.decompose import slic_decompose, superpixel_labels_from_pixels
from spmatch.services.harness import accuracy_metrics, displacement_field, residual_displacement_std
from spmatch.services.imaging import RandomSource
from spmatch.services.labeling import argmax_label, label_fusion
from spmatch.services.library import featurize
from spmatch.services.spm import ExemplarLibrary, FeaturedImage, spm_search

logger = logging.getLogger(__name__)

SHAPE_COLOR = (0.85, 0.25, 0.2)
DISC_RADIUS = 10.0
RING_RADIUS = 20.0


# ============================================================================
# Synthetic data
# ============================================================================


def synthetic_texture(
    height: int,
    width: int,
    rng: np.random.Generator,
    smoothness: float = 3.0,
    channels: int = 3,
) -> ImageGrid:
    """Smoothed color noise, each channel stretched to [0, 1]."""
    noise = rng.random((height, width, channels))
    smooth = np.stack(
        [ndimage.gaussian_filter(noise[:, :, ch], smoothness, mode="reflect") for ch in range(channels)],
        axis=-1,
    )
    lo = smooth.min(axis=(0, 1), keepdims=True)
    hi = smooth.max(axis=(0, 1), keepdims=True)
    return ImageGrid((smooth - lo) / np.maximum(hi - lo, 1e-12))


def shear_image(image: ImageGrid, shear: float) -> ImageGrid:
    """Horizontal shear about the image's middle row: x' = x + shear (y - h/2)."""
    h = image.height
    matrix = np.array([[1.0, 0.0], [-shear, 1.0]])
    offset = np.array([0.0, shear * h / 2.0])
    channels = [
        ndimage.affine_transform(image.data[:, :, ch], matrix, offset=offset, order=1, mode="reflect")
        for ch in range(image.channels)
    ]
    return ImageGrid(np.clip(np.stack(channels, axis=-1), 0.0, 1.0))


def shape_sample(size: int, rng: np.random.Generator) -> tuple[ImageGrid, LabelMap]:
    """
    One image of the 3-class shape dataset.

    A uniformly colored disc of radius RING_RADIUS sits on a dim texture. Pixels
    within DISC_RADIUS of its center are label 1, the outer annulus label 2, the
    background label 0. Disc and annulus share a color, so only context tells
    them apart.
    """
    background = synthetic_texture(size, size, rng, smoothness=2.0).data * 0.35
    margin = RING_RADIUS + 2
    cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
    rows, cols = np.mgrid[0:size, 0:size]
    radius = np.hypot(rows - cy, cols - cx)

    data = background.copy()
    shape = radius < RING_RADIUS
    color = np.array(SHAPE_COLOR) + rng.normal(0.0, 0.01, size=(size, size, 3))
    data[shape] = color[shape]

    labels = np.zeros((size, size), dtype=np.int64)
    labels[shape] = 2
    labels[radius < DISC_RADIUS] = 1
    return ImageGrid(np.clip(data, 0.0, 1.0)), LabelMap(labels)


def shape_dataset(count: int, size: int, seed: int = 0) -> list[tuple[ImageGrid, LabelMap]]:
    source = RandomSource(seed)
    return [shape_sample(size, source.substream(9, n)) for n in range(count)]


def leave_one_out(entries: Sequence[FeaturedImage], index: int) -> ExemplarLibrary:
    """Library of every entry except one."""
    if not 0 <= index < len(entries):
        raise DomainError(f"Index {index} out of range for {len(entries)} entries")
    return ExemplarLibrary(e for n, e in enumerate(entries) if n != index)


# ============================================================================
# Matching experiments
# ============================================================================


@dataclass(frozen=True)
class DisplacementSummary:
    radius: float
    median: float
    spacing: float


def _decompose_pair(
    image: ImageGrid, superpixels: int, seed: int
) -> tuple[Decomposition, Decomposition]:
    first = slic_decompose(image, superpixels, compactness=0.1, rng=RandomSource(seed))
    second = slic_decompose(image, superpixels, compactness=0.2, rng=RandomSource(seed + 1), jitter=0.5)
    return first, second


def decomposition_robustness(
    image: ImageGrid,
    superpixels: int = 64,
    radius_widths: Sequence[float] = (0.0, 3.0),
    k: int = 4,
    iterations: int = 5,
    seed: int = 0,
    feature: FeatureConfig | None = None,
) -> list[DisplacementSummary]:
    """
    Match one decomposition of an image to another decomposition of the same image.

    Returns the median best-of-k displacement per radius (given in mean superpixel widths).
    """
    feature = feature or FeatureConfig()
    first, second = _decompose_pair(image, superpixels, seed)
    test = featurize(image, first, feature)
    library = ExemplarLibrary([featurize(image, second, feature)])

    summaries = []
    for widths in radius_widths:
        radius = widths * first.mean_spacing
        ann = spm_search(test, library, SpmParams(radius=radius, k=k, iterations=iterations, seed=seed))
        field = displacement_field(ann, test, library)
        summaries.append(DisplacementSummary(radius, float(np.median(field.magnitudes)), first.mean_spacing))
        logger.info("R=%.1f: median displacement %.2f px", radius, summaries[-1].median)
    return summaries


def feature_comparison(
    image: ImageGrid,
    superpixels: int = 64,
    radius_widths: float = 3.0,
    seed: int = 0,
) -> dict[str, DisplacementSummary]:
    """Displacement across two decompositions with color-only and color + texture descriptors."""
    configs = {
        "mean-color": FeatureConfig(kind="mean-color"),
        "concat": FeatureConfig(kind="concat"),
    }
    return {
        name: decomposition_robustness(image, superpixels, (radius_widths,), seed=seed, feature=config)[0]
        for name, config in configs.items()
    }


def shear_residual(
    image: ImageGrid,
    shear: float = 0.2,
    superpixels: int = 64,
    radius_widths: float = 3.0,
    k: int = 4,
    iterations: int = 5,
    seed: int = 0,
) -> float:
    """Residual displacement (in mean superpixel widths) after removing the best affine map."""
    feature = FeatureConfig()
    sheared = shear_image(image, shear)
    source = RandomSource(seed)
    test_decomp = slic_decompose(image, superpixels, rng=source)
    lib_decomp = slic_decompose(sheared, superpixels, rng=source)
    test = featurize(image, test_decomp, feature)
    library = ExemplarLibrary([featurize(sheared, lib_decomp, feature)])

    radius = radius_widths * test_decomp.mean_spacing
    ann = spm_search(test, library, SpmParams(radius=radius, k=k, iterations=iterations, seed=seed))
    field = displacement_field(ann, test, library)
    return residual_displacement_std(field, test_decomp) / test_decomp.mean_spacing


# ============================================================================
# Labeling experiment
# ============================================================================


def _prepare_labeled(
    samples: Sequence[tuple[ImageGrid, LabelMap]], superpixels: int, source: RandomSource
) -> list[FeaturedImage]:
    feature = FeatureConfig()
    prepared = []
    for image, labels in samples:
        decomp = slic_decompose(image, superpixels, rng=source)
        prepared.append(featurize(image, decomp, feature, labels=superpixel_labels_from_pixels(labels, decomp)))
    return prepared


def _fused_accuracy(
    test: FeaturedImage,
    library: ExemplarLibrary,
    radius_widths: float,
    k: int,
    iterations: int,
    seed: int,
    fusion: FusionParams,
) -> float:
    radius = radius_widths * test.decomposition.mean_spacing
    ann = spm_search(test, library, SpmParams(radius=radius, k=k, iterations=iterations, seed=seed))
    predicted = argmax_label(label_fusion(ann, test, library, fusion))
    accuracy, _ = accuracy_metrics(predicted, test.labels, None, test.decomposition)
    return float(accuracy or 0.0)


def labeling_accuracy(
    train: Sequence[tuple[ImageGrid, LabelMap]],
    tests: Sequence[tuple[ImageGrid, LabelMap]],
    radius_widths: float,
    superpixels: int = 64,
    k: int = 4,
    iterations: int = 5,
    seed: int = 0,
    fusion: FusionParams | None = None,
) -> float:
    """Mean superpixel accuracy of argmax label fusion over the test images."""
    fusion = fusion or FusionParams(beta=float("inf"))
    source = RandomSource(seed)
    library = ExemplarLibrary(_prepare_labeled(train, superpixels, source))
    accuracies = [
        _fused_accuracy(test, library, radius_widths, k, iterations, seed, fusion)
        for test in _prepare_labeled(tests, superpixels, source)
    ]
    mean = float(np.mean(accuracies))
    logger.info("R=%.1f widths: mean superpixel accuracy %.4f", radius_widths, mean)
    return mean


def leave_one_out_accuracy(
    samples: Sequence[tuple[ImageGrid, LabelMap]],
    radius_widths: float,
    superpixels: int = 64,
    k: int = 4,
    iterations: int = 5,
    seed: int = 0,
    fusion: FusionParams | None = None,
) -> float:
    """Mean superpixel accuracy when each sample is labeled from all the others."""
    if len(samples) < 2:
        raise DomainError(f"Leave-one-out needs at least 2 samples, got {len(samples)}")
    fusion = fusion or FusionParams(beta=float("inf"))
    prepared = _prepare_labeled(samples, superpixels, RandomSource(seed))
    accuracies = [
        _fused_accuracy(test, leave_one_out(prepared, n), radius_widths, k, iterations, seed, fusion)
        for n, test in enumerate(prepared)
    ]
    mean = float(np.mean(accuracies))
    logger.info("Leave-one-out, R=%.1f widths: mean superpixel accuracy %.4f", radius_widths, mean)
    return mean
