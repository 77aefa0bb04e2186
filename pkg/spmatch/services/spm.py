"""
Superpatch search service - randomized k-ANN search over an exemplar library.

This service provides:
- FeaturedImage and ExemplarLibrary (flat (image, superpixel) index)
- The three search steps: random initialization, angle-guided propagation and
  decaying-box random search (current image plus one random other image)
- spm_search: k fully independent runs in a thread pool, with per-stage
  distance traces and evaluation counters
- AnnField JSON-lines serialization
"""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from spmatch.adapters import filesystem
from spmatch.domain.errors import ConfigMismatchError, DomainError
from spmatch.domain.models import (
    AnnRecord,
    DistanceParams,
    FeatureConfig,
    MatchRecord,
    RandomSearchParams,
    SpmParams,
)
from spmatch.domain.types import AnnField, Decomposition, FeatureTable, ImageGrid, Match, SuperPatch
from spmatch.services.imaging import RandomSource
from spmatch.services.superpatch import (
    Metric,
    build_superpatch_table,
    default_distance_params,
    get_metric,
    superpatch_distance,
)

logger = logging.getLogger(__name__)

Direction = Literal["forward", "reverse"]


# ============================================================================
# Library
# ============================================================================


@dataclass(frozen=True, eq=False)
class FeaturedImage:
    """A decomposed image with its feature table and optional per-superpixel labels."""

    decomposition: Decomposition
    features: FeatureTable
    labels: np.ndarray | None = None
    image: ImageGrid | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if len(self.features) != self.decomposition.size:
            raise DomainError(
                f"{len(self.features)} feature rows for {self.decomposition.size} superpixels"
            )
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64)
            if labels.shape != (self.decomposition.size,):
                raise DomainError(f"Expected {self.decomposition.size} superpixel labels, got {labels.shape}")
            if labels.size and labels.min() < 0:
                raise DomainError("Superpixel labels must be non-negative")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.decomposition.size


class ExemplarLibrary:
    """Exemplar images pooled into one searchable set.

    Every entry shares one feature configuration. The flat index enumerates
    (image id, superpixel id) pairs image by image.
    """

    def __init__(self, entries: Iterable[FeaturedImage] = ()):
        self._entries: list[FeaturedImage] = []
        self._offsets = np.zeros(1, dtype=np.int64)
        self._tables: dict[float, list[tuple[SuperPatch, ...]]] = {}
        self.extend(entries)

    def extend(self, entries: Iterable[FeaturedImage]) -> None:
        """Append exemplars; nothing already indexed changes."""
        for entry in entries:
            if self._entries and entry.features.config != self.feature_config:
                raise ConfigMismatchError(
                    f"Exemplar {entry.name or len(self._entries)} uses a different feature configuration"
                )
            self._entries.append(entry)
            self._offsets = np.append(self._offsets, self._offsets[-1] + entry.size)
            for radius, tables in self._tables.items():
                tables.append(build_superpatch_table(entry.decomposition, radius))

    @property
    def entries(self) -> Sequence[FeaturedImage]:
        return tuple(self._entries)

    @property
    def feature_config(self) -> FeatureConfig:
        if not self._entries:
            raise DomainError("Empty exemplar library")
        return self._entries[0].features.config

    @property
    def total_superpixels(self) -> int:
        return int(self._offsets[-1])

    @property
    def is_labeled(self) -> bool:
        return bool(self._entries) and all(e.labels is not None for e in self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, image_id: int) -> FeaturedImage:
        return self._entries[image_id]

    def locate(self, flat: int) -> tuple[int, int]:
        """Flat index -> (image id, superpixel id)."""
        if not 0 <= flat < self.total_superpixels:
            raise DomainError(f"Flat index {flat} out of range [0, {self.total_superpixels})")
        image_id = int(np.searchsorted(self._offsets, flat, side="right")) - 1
        return image_id, int(flat - self._offsets[image_id])

    def flat_index(self, image_id: int, superpixel_id: int) -> int:
        return int(self._offsets[image_id] + superpixel_id)

    def superpatches(self, radius: float) -> list[tuple[SuperPatch, ...]]:
        """Superpatch tables of every entry for one radius (built once, then cached)."""
        radius = float(radius)
        if radius not in self._tables:
            self._tables[radius] = [build_superpatch_table(e.decomposition, radius) for e in self._entries]
        return self._tables[radius]

    def label_of(self, image_id: int, superpixel_id: int) -> int:
        labels = self._entries[image_id].labels
        if labels is None:
            raise DomainError(f"Exemplar {image_id} has no labels")
        return int(labels[superpixel_id])


# ============================================================================
# Search state
# ============================================================================


@dataclass(frozen=True)
class SearchContext:
    """Immutable inputs shared by every run of one search."""

    test: FeaturedImage
    library: ExemplarLibrary
    radius: float
    distance: DistanceParams
    test_patches: tuple[SuperPatch, ...]
    library_patches: list[tuple[SuperPatch, ...]]
    metric: Metric

    @classmethod
    def build(
        cls,
        test: FeaturedImage,
        library: ExemplarLibrary,
        radius: float,
        distance: DistanceParams | None = None,
    ) -> SearchContext:
        if len(library) == 0:
            raise DomainError("Empty exemplar library")
        if test.features.config != library.feature_config:
            raise ConfigMismatchError("Test features and library features use different configurations")
        if radius < 0:
            raise DomainError(f"Superpatch radius must be >= 0, got {radius}")
        distance = distance or default_distance_params(test.decomposition, radius)
        return cls(
            test=test,
            library=library,
            radius=radius,
            distance=distance,
            test_patches=build_superpatch_table(test.decomposition, radius),
            library_patches=library.superpatches(radius),
            metric=get_metric(distance.metric),
        )

    def evaluate(self, i: int, image_id: int, superpixel_id: int) -> float:
        """Superpatch distance between test superpixel i and a library superpixel."""
        return superpatch_distance(
            self.test_patches[i],
            self.library_patches[image_id][superpixel_id],
            self.test.features,
            self.library[image_id].features,
            self.distance,
            self.metric,
        )


@dataclass
class AnnMap:
    """The single-run ANN map: one match per test superpixel, plus an evaluation counter."""

    image_ids: np.ndarray
    superpixel_ids: np.ndarray
    distances: np.ndarray
    evaluations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if self.evaluations.shape != self.distances.shape:
            self.evaluations = np.zeros(self.distances.shape, dtype=np.int64)

    def match(self, i: int) -> Match:
        return Match(int(self.image_ids[i]), int(self.superpixel_ids[i]), float(self.distances[i]))

    def offer(self, ctx: SearchContext, i: int, image_id: int, superpixel_id: int) -> bool:
        """Evaluate a candidate and adopt it on strict improvement."""
        if image_id == self.image_ids[i] and superpixel_id == self.superpixel_ids[i]:
            return False
        d = ctx.evaluate(i, image_id, superpixel_id)
        self.evaluations[i] += 1
        if d < self.distances[i]:
            self.image_ids[i] = image_id
            self.superpixel_ids[i] = superpixel_id
            self.distances[i] = d
            return True
        return False


def substreams(source: RandomSource, run: int, n: int) -> list[np.random.Generator]:
    """One generator per test superpixel for a given run."""
    return [source.substream(run, i) for i in range(n)]


# ============================================================================
# Initialization
# ============================================================================


def initialize(ctx: SearchContext, rngs: Sequence[np.random.Generator]) -> AnnMap:
    """
    Assign every test superpixel a uniformly random library superpixel.

    Raises:
        DomainError: Empty library
    """
    total = ctx.library.total_superpixels
    if total == 0:
        raise DomainError("Empty exemplar library")
    n = ctx.test.size
    ann = AnnMap(
        image_ids=np.zeros(n, dtype=np.int64),
        superpixel_ids=np.zeros(n, dtype=np.int64),
        distances=np.zeros(n, dtype=np.float64),
    )
    for i in range(n):
        image_id, superpixel_id = ctx.library.locate(int(rngs[i].integers(total)))
        ann.image_ids[i] = image_id
        ann.superpixel_ids[i] = superpixel_id
        ann.distances[i] = ctx.evaluate(i, image_id, superpixel_id)
        ann.evaluations[i] += 1
    return ann


# ============================================================================
# Propagation
# ============================================================================


def circular_difference(angles: np.ndarray | float, target: float) -> np.ndarray:
    """min(|a - t|, 2 pi - |a - t|) with both angles taken mod 2 pi."""
    delta = np.abs(np.mod(np.asarray(angles, dtype=np.float64) - target, 2 * math.pi))
    return np.minimum(delta, 2 * math.pi - delta)


def closest_direction(angles: np.ndarray, target: float) -> int:
    """Position of the angle circularly closest to target (first on ties)."""
    return int(np.argmin(circular_difference(angles, target)))


def _propagation_target(
    ctx: SearchContext, i: int, i_prime: int, image_id: int, superpixel_id: int
) -> int:
    centers = ctx.test.decomposition.barycenters
    theta = math.atan2(centers[i_prime, 1] - centers[i, 1], centers[i_prime, 0] - centers[i, 0])

    decomp = ctx.library[image_id].decomposition
    neighbors = decomp.neighbors[superpixel_id]
    if neighbors.size == 0:
        return superpixel_id
    vectors = decomp.barycenters[neighbors] - decomp.barycenters[superpixel_id]
    angles = np.arctan2(vectors[:, 1], vectors[:, 0])
    return int(neighbors[closest_direction(angles, theta + math.pi)])


def propagation_candidate(ctx: SearchContext, i: int, i_prime: int, current: Match) -> Match:
    """
    Candidate for superpixel i derived from its processed neighbor i'.

    ``current`` is the match of i'. The candidate is the neighbor of that match
    (in its own image) whose direction is circularly closest to the direction
    from c_i to c_i' rotated by pi. Angles use (x, y) barycenters, y down.
    A match without neighbors is returned unchanged.
    """
    target = _propagation_target(ctx, i, i_prime, current.image_id, current.superpixel_id)
    if target == current.superpixel_id:
        return current
    return Match(current.image_id, target, ctx.evaluate(i, current.image_id, target))


def propagate_pass(ctx: SearchContext, ann: AnnMap, direction: Direction) -> AnnMap:
    """
    One propagation pass in scan order (forward) or reverse scan order.

    Each neighbor already processed in this pass offers one candidate; strict
    improvement is required to replace the current match.
    """
    decomp = ctx.test.decomposition
    order = decomp.scan_order if direction == "forward" else decomp.scan_order[::-1]
    processed = np.zeros(decomp.size, dtype=bool)
    for i in order:
        for i_prime in decomp.neighbors[i]:
            if not processed[i_prime]:
                continue
            image_id = int(ann.image_ids[i_prime])
            target = _propagation_target(ctx, int(i), int(i_prime), image_id, int(ann.superpixel_ids[i_prime]))
            ann.offer(ctx, int(i), image_id, target)
        processed[i] = True
    return ann


# ============================================================================
# Random search
# ============================================================================


def radius_schedule(initial: float, ratio: float = 0.5, floor: float = 1.0) -> list[float]:
    """Geometric radii initial, initial*ratio, ... while >= floor."""
    radii = []
    r = float(initial)
    while r >= floor:
        radii.append(r)
        r *= ratio
    return radii


def sample_in_box(
    rng: np.random.Generator, center: tuple[float, float], r: float, height: int, width: int
) -> tuple[int, int]:
    """Uniform pixel (row, col) in the square box of half-width r, clamped to the image."""
    cx, cy = center
    x0, x1 = max(0, math.floor(cx - r)), min(width - 1, math.ceil(cx + r))
    y0, y1 = max(0, math.floor(cy - r)), min(height - 1, math.ceil(cy + r))
    return int(rng.integers(y0, y1 + 1)), int(rng.integers(x0, x1 + 1))


def _probe_image(
    ctx: SearchContext,
    ann: AnnMap,
    i: int,
    image_id: int,
    center: tuple[float, float],
    params: RandomSearchParams,
    rng: np.random.Generator,
) -> None:
    labelmap = ctx.library[image_id].decomposition.labelmap
    height, width = labelmap.shape
    initial = params.initial_radius or float(max(height, width))
    for r in radius_schedule(initial, params.ratio, params.floor):
        row, col = sample_in_box(rng, center, r, height, width)
        ann.offer(ctx, i, image_id, int(labelmap[row, col]))


def random_search_pass(
    ctx: SearchContext,
    ann: AnnMap,
    params: RandomSearchParams,
    rngs: Sequence[np.random.Generator],
) -> AnnMap:
    """
    Decaying-box random search around each superpixel's current match.

    Boxes stay centered on the match held when the superpixel's search starts.
    After the current image, one uniformly random other library image is probed
    around the same relative position.
    """
    library = ctx.library
    for i in ctx.test.decomposition.scan_order:
        i = int(i)
        rng = rngs[i]
        image_id = int(ann.image_ids[i])
        decomp = library[image_id].decomposition
        cx, cy = decomp.barycenters[int(ann.superpixel_ids[i])]
        _probe_image(ctx, ann, i, image_id, (float(cx), float(cy)), params, rng)

        if len(library) > 1:
            other = int(rng.integers(len(library) - 1))
            if other >= image_id:
                other += 1
            h, w = decomp.source_image_size
            oh, ow = library[other].decomposition.source_image_size
            scaled = ((cx + 0.5) * ow / w - 0.5, (cy + 0.5) * oh / h - 0.5)
            _probe_image(ctx, ann, i, other, scaled, params, rng)
    return ann


# ============================================================================
# Search
# ============================================================================


@dataclass
class RunResult:
    image_ids: np.ndarray
    superpixel_ids: np.ndarray
    distances: np.ndarray
    trace: np.ndarray
    evaluations: np.ndarray


def _single_run(ctx: SearchContext, params: SpmParams, source: RandomSource, run: int) -> RunResult:
    n = ctx.test.size
    rngs = substreams(source, run, n)
    trace = np.zeros((params.iterations + 1, n))
    evaluations = np.zeros((params.iterations + 1, n), dtype=np.int64)

    ann = initialize(ctx, rngs)
    trace[0] = ann.distances
    evaluations[0] = ann.evaluations

    for it in range(params.iterations):
        ann.evaluations = np.zeros(n, dtype=np.int64)
        propagate_pass(ctx, ann, "forward" if it % 2 == 0 else "reverse")
        random_search_pass(ctx, ann, params.random_search, rngs)
        trace[it + 1] = ann.distances
        evaluations[it + 1] = ann.evaluations
        logger.debug(
            "run %d iteration %d: mean distance %.6g, %d evaluations",
            run, it + 1, float(np.mean(ann.distances)), int(ann.evaluations.sum()),
        )

    return RunResult(ann.image_ids, ann.superpixel_ids, ann.distances, trace, evaluations)


def spm_search(
    test: FeaturedImage,
    library: ExemplarLibrary,
    params: SpmParams,
    distance: DistanceParams | None = None,
    rng: RandomSource | None = None,
) -> AnnField:
    """
    Run k independent superpatch searches.

    Each run initializes at random, then alternates forward/reverse propagation
    passes, each followed by random search. Runs draw from disjoint random
    substreams keyed by (run, superpixel), so results do not depend on thread
    scheduling. Runs share a thread pool; only the numpy work inside distance
    evaluations runs in parallel, the pass loops themselves hold the GIL.

    Args:
        test: Test image (decomposition and features)
        library: Exemplar library
        params: Search parameters (radius, k, iterations, seed, threads)
        distance: Distance parameters; defaults from the test decomposition
        rng: Random source; defaults to RandomSource(params.seed)

    Returns:
        AnnField with final matches, distance traces and evaluation counts

    Raises:
        DomainError: Empty library
        ConfigMismatchError: Feature configurations differ
    """
    ctx = SearchContext.build(test, library, params.radius, distance)
    source = rng or RandomSource(params.seed)
    workers = min(params.k, params.threads or os.cpu_count() or 1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(lambda r: _single_run(ctx, params, source, r), range(params.k)))
    else:
        runs = [_single_run(ctx, params, source, r) for r in range(params.k)]

    field_ = AnnField(
        image_ids=np.stack([r.image_ids for r in runs], axis=1),
        superpixel_ids=np.stack([r.superpixel_ids for r in runs], axis=1),
        distances=np.stack([r.distances for r in runs], axis=1),
        traces=np.stack([r.trace for r in runs]),
        evaluations=np.stack([r.evaluations for r in runs]),
    )
    logger.info(
        "Search done: %d superpixels, k=%d, %d distance evaluations",
        field_.size, field_.k, int(field_.evaluations.sum()),
    )
    return field_


# ============================================================================
# Serialization
# ============================================================================


def ann_records(ann: AnnField) -> list[AnnRecord]:
    return [
        AnnRecord(
            i=i,
            matches=[MatchRecord(img=m.image_id, sp=m.superpixel_id, d=m.distance) for m in ann.matches(i)],
        )
        for i in range(ann.size)
    ]


def save_ann_field(ann: AnnField, path: str | Path) -> None:
    """Write one JSON line per test superpixel: {"i", "matches": [{"img", "sp", "d"}]}."""
    filesystem.write_jsonl(Path(path), (record.model_dump_json() for record in ann_records(ann)))


def load_ann_field(path: str | Path) -> AnnField:
    """
    Read an AnnField written by save_ann_field.

    Traces hold only the final distances and evaluation counts are zero.
    """
    records = [AnnRecord.model_validate(line) for line in filesystem.read_jsonl(Path(path))]
    records.sort(key=lambda r: r.i)
    if not records:
        raise DomainError(f"No records in {path}")
    image_ids = np.array([[m.img for m in r.matches] for r in records], dtype=np.int64)
    superpixel_ids = np.array([[m.sp for m in r.matches] for r in records], dtype=np.int64)
    distances = np.array([[m.d for m in r.matches] for r in records], dtype=np.float64)
    return AnnField(
        image_ids=image_ids,
        superpixel_ids=superpixel_ids,
        distances=distances,
        traces=distances.T[:, None, :],
        evaluations=np.zeros((distances.shape[1], 1, distances.shape[0]), dtype=np.int64),
    )
