"""Array-backed domain types.

These are frozen dataclasses around numpy arrays. Arrays are made read-only on
construction so instances can be shared between worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from spmatch.domain.errors import DomainError

if TYPE_CHECKING:
    from spmatch.domain.models import FeatureConfig


def _frozen(array: Any, dtype: Any = None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ============================================================================
# Imaging
# ============================================================================


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """An image as a (height, width, channels) float array with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise DomainError(f"ImageGrid needs shape (h, w, c) with all sizes >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DomainError("ImageGrid values must be finite")
        if data.min() < 0.0 or data.max() > 1.0:
            raise DomainError("ImageGrid values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel non-negative integer labels."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or min(labels.shape) < 1:
            raise DomainError(f"LabelMap needs a 2-D array, got shape {labels.shape}")
        if labels.dtype.kind not in "iu":
            raise DomainError("LabelMap labels must be integers")
        if labels.min() < 0:
            raise DomainError("LabelMap labels must be non-negative")
        object.__setattr__(self, "labels", _frozen(labels, np.int64))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def num_labels(self) -> int:
        return int(self.labels.max()) + 1


# ============================================================================
# Decomposition
# ============================================================================


@dataclass(frozen=True)
class SuperpixelRecord:
    """One superpixel: barycenter in (x, y) pixel-center coordinates."""

    index: int
    barycenter: tuple[float, float]
    pixel_count: int
    first_raster_pixel: int


@dataclass(frozen=True, eq=False)
class Decomposition:
    """A partition of an image into superpixels indexed 0..n-1.

    Attributes:
        labelmap: (h, w) superpixel index per pixel
        barycenters: (n, 2) array of (x, y); pixel (r, c) sits at (c, r)
        pixel_counts: (n,) pixels per superpixel
        first_raster_pixel: (n,) linear index of the first pixel in raster order
        edges: (E, 2) undirected 4-adjacency edges with i < j, sorted
        neighbors: per superpixel, sorted array of adjacent indices
        scan_order: permutation of indices by ascending first raster pixel
        disconnected: indices whose pixel set is not 4-connected (import only)
    """

    labelmap: np.ndarray
    barycenters: np.ndarray
    pixel_counts: np.ndarray
    first_raster_pixel: np.ndarray
    edges: np.ndarray
    neighbors: tuple[np.ndarray, ...]
    scan_order: np.ndarray
    disconnected: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "labelmap", _frozen(self.labelmap, np.int64))
        object.__setattr__(self, "barycenters", _frozen(self.barycenters, np.float64))
        object.__setattr__(self, "pixel_counts", _frozen(self.pixel_counts, np.int64))
        object.__setattr__(self, "first_raster_pixel", _frozen(self.first_raster_pixel, np.int64))
        object.__setattr__(self, "edges", _frozen(np.reshape(self.edges, (-1, 2)), np.int64))
        object.__setattr__(
            self, "neighbors", tuple(_frozen(nb, np.int64) for nb in self.neighbors)
        )
        object.__setattr__(self, "scan_order", _frozen(self.scan_order, np.int64))

    @property
    def size(self) -> int:
        """Number of superpixels |A|."""
        return int(self.barycenters.shape[0])

    @property
    def source_image_size(self) -> tuple[int, int]:
        """(h, w) of the decomposed image."""
        return int(self.labelmap.shape[0]), int(self.labelmap.shape[1])

    @property
    def superpixels(self) -> list[SuperpixelRecord]:
        return [self.record(i) for i in range(self.size)]

    def record(self, i: int) -> SuperpixelRecord:
        if not 0 <= i < self.size:
            raise DomainError(f"Superpixel index {i} out of range [0, {self.size})")
        x, y = self.barycenters[i]
        return SuperpixelRecord(
            index=i,
            barycenter=(float(x), float(y)),
            pixel_count=int(self.pixel_counts[i]),
            first_raster_pixel=int(self.first_raster_pixel[i]),
        )

    @property
    def mean_spacing(self) -> float:
        """Average distance between barycenters, sqrt(hw / |A|)."""
        h, w = self.source_image_size
        return float(np.sqrt(h * w / self.size))


# ============================================================================
# Superpatches and features
# ============================================================================


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """One feature vector per superpixel, all produced by the same FeatureConfig."""

    values: np.ndarray
    config: FeatureConfig

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DomainError(f"FeatureTable needs an (n, F) array, got {values.shape}")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def kind(self) -> str:
        return self.config.kind

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class SuperPatch:
    """A center superpixel plus every superpixel whose barycenter lies within radius R.

    offsets[m] = c_{members[m]} - c_center as (dx, dy).
    """

    center: int
    radius: float
    members: np.ndarray
    offsets: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", _frozen(self.members, np.int64))
        object.__setattr__(self, "offsets", _frozen(np.reshape(self.offsets, (-1, 2)), np.float64))

    def __len__(self) -> int:
        return int(self.members.shape[0])


# ============================================================================
# Search results
# ============================================================================


@dataclass(frozen=True, order=True)
class Match:
    """A library correspondence: (image id, superpixel id) and its superpatch distance."""

    image_id: int
    superpixel_id: int
    distance: float = field(compare=False)


@dataclass(frozen=True, eq=False)
class AnnField:
    """k matches per test superpixel, one per independent search.

    Attributes:
        image_ids, superpixel_ids, distances: (n, k) arrays
        traces: (k, iterations + 1, n) best distance after initialization and each iteration
        evaluations: (k, iterations + 1, n) distance evaluations spent per stage and superpixel
    """

    image_ids: np.ndarray
    superpixel_ids: np.ndarray
    distances: np.ndarray
    traces: np.ndarray
    evaluations: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_ids", _frozen(self.image_ids, np.int64))
        object.__setattr__(self, "superpixel_ids", _frozen(self.superpixel_ids, np.int64))
        object.__setattr__(self, "distances", _frozen(self.distances, np.float64))
        object.__setattr__(self, "traces", _frozen(self.traces, np.float64))
        object.__setattr__(self, "evaluations", _frozen(self.evaluations, np.int64))

    @property
    def size(self) -> int:
        return int(self.distances.shape[0])

    @property
    def k(self) -> int:
        return int(self.distances.shape[1])

    def matches(self, i: int) -> list[Match]:
        return [
            Match(int(self.image_ids[i, r]), int(self.superpixel_ids[i, r]), float(self.distances[i, r]))
            for r in range(self.k)
        ]


# ============================================================================
# Labeling
# ============================================================================


@dataclass(frozen=True, eq=False)
class LabelFusionMap:
    """(n, M) per-superpixel label probabilities."""

    probabilities: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if probs.ndim != 2:
            raise DomainError(f"LabelFusionMap needs an (n, M) array, got {probs.shape}")
        if np.any(probs < 0):
            raise DomainError("Label probabilities must be non-negative")
        object.__setattr__(self, "probabilities", _frozen(probs))

    @property
    def num_labels(self) -> int:
        return int(self.probabilities.shape[1])

    def __len__(self) -> int:
        return int(self.probabilities.shape[0])


@dataclass(frozen=True, eq=False)
class Labeling:
    """Final label per superpixel, with the energy trace when regularized."""

    labels: np.ndarray
    energy_trace: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per test-superpixel (dx, dy) from source barycenter to matched barycenter."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(vectors)):
            raise DomainError("Displacement vectors must be finite")
        object.__setattr__(self, "vectors", _frozen(vectors))

    @property
    def magnitudes(self) -> np.ndarray:
        return np.hypot(self.vectors[:, 0], self.vectors[:, 1])
