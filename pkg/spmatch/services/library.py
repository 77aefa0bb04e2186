"""
Library service - exemplar manifests, decomposition caching and feature caches.

A manifest is a JSON array of {"image", "labels"?, "decomposition"?} objects with
paths relative to the manifest. Missing decompositions are computed once and
cached beside the image as ``<stem>.sp.png`` (+ ``<stem>.sp.json``). A sidecar
without a ``params`` record was written by ``spmatch decompose`` or by hand and
is reused as is, never overwritten. Feature tables are cached per decomposition
as ``<stem>.<labels-hash>.feat.npz`` keyed by a content hash of the image bytes,
the superpixel labels and the feature configuration; a key mismatch is an error
unless the caller asks for a rebuild.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import TypeAdapter, ValidationError

from spmatch.adapters import filesystem
from spmatch.domain.errors import FormatError, StaleCacheError
from spmatch.domain.models import DecomposeParams, FeatureConfig, ManifestEntry, RunConfig
from spmatch.domain.types import Decomposition, FeatureTable, ImageGrid
from spmatch.services.decompose import (
    export_decomposition,
    load_decomposition,
    sidecar_path,
    slic_decompose,
    superpixel_labels_from_pixels,
)
from spmatch.services.imaging import RandomSource, load_image_stack, load_labelmap_pixelwise
from spmatch.services.spm import ExemplarLibrary, FeaturedImage
from spmatch.services.superpatch import compute_feature

logger = logging.getLogger(__name__)

_MANIFEST = TypeAdapter(list[ManifestEntry])
FEATURE_CACHE_TAG_LENGTH = 12


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """
    Read and validate a library manifest.

    Raises:
        ImageIOError: Unreadable file
        FormatError: Invalid JSON or entries
    """
    path = Path(path)
    document = filesystem.read_json(path)
    try:
        return _MANIFEST.validate_python(document)
    except ValidationError as e:
        raise FormatError(f"Invalid manifest {path}: {e}") from e


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


# ============================================================================
# Caches
# ============================================================================


def decomposition_cache_path(image_path: Path) -> Path:
    return image_path.with_suffix(".sp.png")


def decomposition_digest(decomp: Decomposition) -> str:
    return filesystem.sha256_bytes(np.ascontiguousarray(decomp.labelmap, dtype=np.int64).tobytes())


def feature_cache_path(image_path: Path, decomp: Decomposition) -> Path:
    """One cache file per (image, decomposition) pair."""
    tag = decomposition_digest(decomp)[:FEATURE_CACHE_TAG_LENGTH]
    return image_path.with_name(f"{image_path.stem}.{tag}.feat.npz")


def feature_cache_key(image_paths: Sequence[Path], decomp: Decomposition, config: FeatureConfig) -> str:
    """sha256 over the image bytes, the superpixel labels and the feature configuration."""
    chunks = [filesystem.read_binary_sync(p) for p in image_paths]
    chunks.append(np.ascontiguousarray(decomp.labelmap, dtype=np.int64).tobytes())
    chunks.append(config.model_dump_json(by_alias=True).encode("utf-8"))
    return filesystem.sha256_bytes(*chunks)


def obtain_decomposition(
    image: ImageGrid,
    image_path: Path,
    params: DecomposeParams,
    seed: int = 0,
    explicit: Path | None = None,
    cache: bool = True,
) -> Decomposition:
    """
    Decomposition for an image: the explicit file, a matching cached one, or a fresh SLIC run.

    A cached decomposition is reused when its sidecar records the same parameters,
    or when it records none: a label image without recorded parameters is user-made and
    is never overwritten.
    """
    if explicit is not None:
        return load_decomposition(explicit)

    cached = decomposition_cache_path(image_path)
    fingerprint = params.model_dump(mode="json")
    if cache and filesystem.file_exists(cached):
        recorded = None
        if filesystem.file_exists(sidecar_path(cached)):
            recorded = filesystem.read_json(sidecar_path(cached)).get("params")
        if recorded is None:
            logger.info("Using user decomposition %s", cached)
            return load_decomposition(cached)
        if recorded == fingerprint:
            logger.debug("Using cached decomposition %s", cached)
            return load_decomposition(cached)

    decomp = slic_decompose(
        image,
        params.superpixels,
        compactness=params.compactness,
        iterations=params.iterations,
        rng=RandomSource(seed),
        jitter=params.jitter,
    )
    if cache:
        _, json_path = export_decomposition(decomp, cached)
        sidecar = filesystem.read_json(json_path)
        sidecar["params"] = fingerprint
        filesystem.write_json(json_path, sidecar)
    return decomp


def obtain_features(
    image: ImageGrid,
    image_paths: Sequence[Path],
    decomp: Decomposition,
    config: FeatureConfig,
    cache: bool = True,
    rebuild: bool = False,
) -> FeatureTable:
    """
    Feature table for an image, read from or written to its cache.

    Raises:
        StaleCacheError: A cache exists but its key does not match and rebuild is False
    """
    if not cache:
        return compute_feature(decomp, image, config)

    path = feature_cache_path(image_paths[0], decomp)
    key = feature_cache_key(image_paths, decomp, config)
    if filesystem.file_exists(path) and not rebuild:
        archive = filesystem.load_npz(path)
        stored = str(archive["key"]) if "key" in archive else ""
        if stored != key:
            raise StaleCacheError(f"Feature cache {path} is stale; rerun with --rebuild-cache")
        logger.debug("Using cached features %s", path)
        return FeatureTable(archive["values"], config)

    table = compute_feature(decomp, image, config)
    filesystem.save_npz(path, key=np.array(key), values=np.asarray(table.values))
    return table


# ============================================================================
# Loading
# ============================================================================


def featurize(
    image: ImageGrid,
    decomp: Decomposition,
    config: FeatureConfig,
    labels: np.ndarray | None = None,
    name: str = "",
) -> FeaturedImage:
    """In-memory FeaturedImage without any caching."""
    return FeaturedImage(decomp, compute_feature(decomp, image, config), labels=labels, image=image, name=name)


def load_featured_image(
    image_paths: Sequence[str | Path],
    config: RunConfig,
    decomposition: str | Path | None = None,
    labels: str | Path | None = None,
    rebuild: bool = False,
) -> FeaturedImage:
    """Load an image (or stack), decompose, featurize and optionally label it."""
    paths = [Path(p) for p in image_paths]
    image = load_image_stack(paths)
    decomp = obtain_decomposition(
        image,
        paths[0],
        config.decompose,
        seed=config.spm.seed,
        explicit=Path(decomposition) if decomposition else None,
        cache=config.cache,
    )
    features = obtain_features(image, paths, decomp, config.feature, cache=config.cache, rebuild=rebuild)
    superpixel_labels = None
    if labels is not None:
        superpixel_labels = superpixel_labels_from_pixels(load_labelmap_pixelwise(labels), decomp)
    return FeaturedImage(decomp, features, labels=superpixel_labels, image=image, name=str(paths[0]))


def load_library(manifest_path: str | Path, config: RunConfig, rebuild: bool = False) -> ExemplarLibrary:
    """
    Build an ExemplarLibrary from a manifest.

    Raises:
        ImageIOError / FormatError: Unreadable manifest or member files
        StaleCacheError: Stale feature cache without rebuild
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    entries = []
    for entry in load_manifest(manifest_path):
        entries.append(
            load_featured_image(
                [_resolve(base, p) for p in entry.image_paths],
                config,
                decomposition=_resolve(base, entry.decomposition) if entry.decomposition else None,
                labels=_resolve(base, entry.labels) if entry.labels else None,
                rebuild=rebuild,
            )
        )
    logger.info("Library loaded: %d exemplar(s) from %s", len(entries), manifest_path)
    return ExemplarLibrary(entries)
