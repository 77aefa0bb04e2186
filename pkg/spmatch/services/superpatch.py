"""
Superpatch service - features, superpatches and the superpatch distance.

This service provides:
- Per-superpixel descriptors (mean color, cumulative histograms, orientation
  histograms, weighted concatenations)
- Superpatch construction by barycenter radius
- The pair weight and weighted superpatch distance, plus the exact-offset
  degenerate mode that reduces to a normalized SSD on per-pixel decompositions
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable

import numpy as np
from scipy.spatial import cKDTree

from spmatch.domain.errors import DomainError
from spmatch.domain.models import DistanceParams, FeatureConfig
from spmatch.domain.types import Decomposition, FeatureTable, ImageGrid, SuperPatch, SuperpixelRecord
from spmatch.services.imaging import luminance, to_color_space

logger = logging.getLogger(__name__)

# Members at distance R are included; tolerance absorbs float noise in barycenters.
RADIUS_TOLERANCE = 1e-9
OFFSET_TOLERANCE = 1e-9

Metric = Callable[[np.ndarray, np.ndarray], np.ndarray]


# ============================================================================
# Feature metrics
# ============================================================================


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance over the last axis (broadcasting)."""
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1))


def sqeuclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance over the last axis (broadcasting)."""
    diff = a - b
    return np.sum(diff * diff, axis=-1)


METRICS: dict[str, Metric] = {
    "euclidean": euclidean,
    "sqeuclidean": sqeuclidean,
}


def get_metric(name: str) -> Metric:
    try:
        return METRICS[name]
    except KeyError as e:
        raise DomainError(f"Unknown feature metric: {name}") from e


# ============================================================================
# Features
# ============================================================================


def _mean_color(flat: np.ndarray, data: np.ndarray, counts: np.ndarray, n: int) -> np.ndarray:
    channels = data.reshape(-1, data.shape[2])
    return np.stack(
        [np.bincount(flat, weights=channels[:, ch], minlength=n) / counts for ch in range(channels.shape[1])],
        axis=1,
    )


def _cumulative_histogram(
    flat: np.ndarray, data: np.ndarray, counts: np.ndarray, n: int, bins: int
) -> np.ndarray:
    channels = data.reshape(-1, data.shape[2])
    blocks = []
    for ch in range(channels.shape[1]):
        index = np.minimum((channels[:, ch] * bins).astype(np.int64), bins - 1)
        hist = np.bincount(flat * bins + index, minlength=n * bins).reshape(n, bins)
        blocks.append(np.cumsum(hist, axis=1) / counts[:, None])
    return np.concatenate(blocks, axis=1)


def _orientation_histogram(flat: np.ndarray, grid: ImageGrid, n: int, bins: int) -> np.ndarray:
    gy, gx = np.gradient(luminance(grid))
    magnitude = np.hypot(gx, gy).ravel()
    angle = np.mod(np.arctan2(gy, gx), np.pi).ravel()
    index = np.minimum((angle / np.pi * bins).astype(np.int64), bins - 1)
    hist = np.bincount(flat * bins + index, weights=magnitude, minlength=n * bins).reshape(n, bins)
    norms = np.linalg.norm(hist, axis=1)
    flat_regions = norms <= 1e-12
    norms[flat_regions] = 1.0
    hist = hist / norms[:, None]
    hist[flat_regions] = 0.0
    return hist


def _block(kind: str, flat: np.ndarray, grid: ImageGrid, counts: np.ndarray, n: int, config: FeatureConfig) -> np.ndarray:
    if kind == "mean-color":
        return _mean_color(flat, grid.data, counts, n)
    if kind == "cumulative-histogram":
        return _cumulative_histogram(flat, grid.data, counts, n, config.bins)
    if kind == "orientation-histogram":
        return _orientation_histogram(flat, grid, n, config.orientation_bins)
    raise DomainError(f"Unknown feature block: {kind}")


def compute_feature(decomp: Decomposition, image: ImageGrid, config: FeatureConfig) -> FeatureTable:
    """
    Compute one descriptor per superpixel.

    Args:
        decomp: Decomposition of ``image``
        image: Source image (any channel count; multi-modal stacks allowed)
        config: Descriptor configuration

    Returns:
        FeatureTable with one row per superpixel

    Raises:
        DomainError: Decomposition and image sizes differ
    """
    if decomp.source_image_size != image.shape:
        raise DomainError(
            f"Decomposition {decomp.source_image_size} does not match image {image.shape}"
        )
    grid = to_color_space(image, config.color)
    flat = np.asarray(decomp.labelmap).ravel()
    counts = np.asarray(decomp.pixel_counts, dtype=np.float64)
    n = decomp.size

    if config.kind == "concat":
        parts = []
        for block in config.blocks:
            values = _block(block.kind, flat, grid, counts, n, config)
            parts.append(values * (block.weight / math.sqrt(values.shape[1])))
        values = np.concatenate(parts, axis=1)
    else:
        values = _block(config.kind, flat, grid, counts, n, config)

    logger.debug("Computed %s features: %d x %d", config.kind, *values.shape)
    return FeatureTable(values, config)


# ============================================================================
# Superpatches
# ============================================================================


def build_superpatch(decomp: Decomposition, i: int, radius: float) -> SuperPatch:
    """
    Build S(A_i): every superpixel whose barycenter lies within ``radius`` of c_i.

    Raises:
        DomainError: Index out of range or negative radius
    """
    if radius < 0:
        raise DomainError(f"Superpatch radius must be >= 0, got {radius}")
    record = decomp.record(i)
    center = np.asarray(record.barycenter)
    offsets = np.asarray(decomp.barycenters) - center
    members = np.flatnonzero(np.hypot(offsets[:, 0], offsets[:, 1]) <= radius + RADIUS_TOLERANCE)
    return SuperPatch(center=i, radius=float(radius), members=members, offsets=offsets[members])


def build_superpatch_table(decomp: Decomposition, radius: float) -> tuple[SuperPatch, ...]:
    """All superpatches of a decomposition, using k-d tree radius queries."""
    if radius < 0:
        raise DomainError(f"Superpatch radius must be >= 0, got {radius}")
    centers = np.asarray(decomp.barycenters)
    if radius == 0:
        return tuple(
            SuperPatch(center=i, radius=0.0, members=np.array([i]), offsets=np.zeros((1, 2)))
            for i in range(decomp.size)
        )
    tree = cKDTree(centers)
    neighborhoods = tree.query_ball_point(centers, radius + RADIUS_TOLERANCE)
    table = []
    for i, found in enumerate(neighborhoods):
        members = np.array(sorted(found), dtype=np.int64)
        table.append(
            SuperPatch(center=i, radius=float(radius), members=members, offsets=centers[members] - centers[i])
        )
    return tuple(table)


# ============================================================================
# Distance
# ============================================================================


def default_distance_params(
    decomp: Decomposition,
    radius: float,
    metric: str = "euclidean",
    sigma1: float | None = None,
    sigma2: float | None = None,
) -> DistanceParams:
    """
    sigma1 defaults to half the mean superpixel spacing, sigma2 to sqrt(2) R.

    With R = 0 sigma2 is infinite, so the center-distance weight is constant 1.
    """
    if sigma1 is None:
        sigma1 = 0.5 * decomp.mean_spacing
    if sigma2 is None:
        sigma2 = math.sqrt(2.0) * radius if radius > 0 else math.inf
    return DistanceParams(sigma1=sigma1, sigma2=sigma2, metric=metric)  # type: ignore[arg-type]


def patch_degeneration_mode(params: DistanceParams) -> DistanceParams:
    """Pair weight becomes the indicator of equal offsets; center weights become 1."""
    return params.model_copy(update={"degenerate": True})


def pair_weight(
    a: SuperpixelRecord,
    b: SuperpixelRecord,
    centers: tuple[tuple[float, float], tuple[float, float]],
    params: DistanceParams,
) -> float:
    """
    Weight of the member pair (a in S(A_i), b in S(B_j)).

    Args:
        a: Member of the first superpatch
        b: Member of the second superpatch
        centers: (c_i, c_j), the two superpatch centers
        params: Distance parameters

    Returns:
        exp(-|x|^2 / sigma1^2) w_s(a) w_s(b) with x = (c_b - c_j) - (c_a - c_i)
    """
    c_i, c_j = np.asarray(centers[0], dtype=np.float64), np.asarray(centers[1], dtype=np.float64)
    off_a = np.asarray(a.barycenter) - c_i
    off_b = np.asarray(b.barycenter) - c_j
    x = off_b - off_a
    if params.degenerate:
        return 1.0 if float(np.hypot(*x)) <= OFFSET_TOLERANCE else 0.0
    return float(
        np.exp(-np.dot(x, x) / params.sigma1**2)
        * np.exp(-np.dot(off_a, off_a) / params.sigma2**2)
        * np.exp(-np.dot(off_b, off_b) / params.sigma2**2)
    )


def superpatch_distance(
    sp_a: SuperPatch,
    sp_b: SuperPatch,
    features_a: FeatureTable,
    features_b: FeatureTable,
    params: DistanceParams,
    metric: Metric | None = None,
) -> float:
    """
    Weighted mean of member-pair feature distances between two superpatches.

    Weights are computed in log space and shifted by their maximum, so the
    result stays finite for any sigma. In degenerate mode the result is the
    mean over exactly aligned pairs, or inf when no member offsets align.
    """
    metric = metric or get_metric(params.metric)
    fa = features_a.values[sp_a.members]
    fb = features_b.values[sp_b.members]

    if not params.degenerate and len(sp_a) == 1 and len(sp_b) == 1:
        return float(metric(fa[0], fb[0]))

    d = metric(fa[:, None, :], fb[None, :, :])
    x = sp_b.offsets[None, :, :] - sp_a.offsets[:, None, :]
    sq = np.sum(x * x, axis=-1)

    if params.degenerate:
        aligned = sq <= OFFSET_TOLERANCE**2
        if not aligned.any():
            return math.inf
        return float(np.mean(d[aligned]))

    log_w = -sq / params.sigma1**2
    if math.isfinite(params.sigma2):
        log_w = log_w - (np.sum(sp_a.offsets**2, axis=1)[:, None] + np.sum(sp_b.offsets**2, axis=1)[None, :]) / params.sigma2**2
    w = np.exp(log_w - log_w.max())
    return float(np.sum(w * d) / np.sum(w))
