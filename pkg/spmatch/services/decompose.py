"""
Decomposition service - superpixel decompositions and their derived structure.

This service provides:
- A SLIC-style decomposer with connectivity enforcement
- Import of externally computed label maps (remapped, disconnected parts flagged)
- Per-pixel decompositions (every pixel its own superpixel)
- Barycenters, 4-adjacency graph and raster scan order
- Export/import as 16-bit PNG plus sidecar JSON
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from spmatch.adapters import filesystem
from spmatch.domain.errors import DomainError, FormatError
from spmatch.domain.types import Decomposition, ImageGrid, LabelMap
from spmatch.services.imaging import RandomSource, load_labelmap_pixelwise

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
MAX_EXPORT_SUPERPIXELS = 65536
GRID_COUNT_SLACK = 0.1
MIN_COUNT_RATIO = 0.8


# ============================================================================
# Derived structure
# ============================================================================


def _adjacency(labelmap: np.ndarray, n: int) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    a = np.concatenate([labelmap[:, :-1].ravel(), labelmap[:-1, :].ravel()])
    b = np.concatenate([labelmap[:, 1:].ravel(), labelmap[1:, :].ravel()])
    differ = a != b
    lo = np.minimum(a[differ], b[differ])
    hi = np.maximum(a[differ], b[differ])
    keys = np.unique(lo * n + hi)
    edges = np.stack([keys // n, keys % n], axis=1) if keys.size else np.zeros((0, 2), np.int64)

    both = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    counts = np.bincount(both[:, 0], minlength=n)
    neighbors = tuple(np.split(both[:, 1], np.cumsum(counts)[:-1]))
    return edges.astype(np.int64), neighbors


def build_adjacency(decomp: Decomposition) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """
    Recompute the 4-adjacency graph of a decomposition.

    Returns:
        (edges, neighbors): (E, 2) sorted edges with i < j, and per-superpixel
        sorted neighbor arrays. Diagonal contact creates no edge.
    """
    return _adjacency(np.asarray(decomp.labelmap), decomp.size)


def compute_scan_order(decomp: Decomposition) -> np.ndarray:
    """Superpixel indices ordered by their first pixel in raster order."""
    return np.argsort(np.asarray(decomp.first_raster_pixel), kind="stable")


def _disconnected(labelmap: np.ndarray) -> tuple[int, ...]:
    flagged = []
    for index, bbox in enumerate(ndimage.find_objects(labelmap + 1)):
        if bbox is None:
            continue
        _, count = ndimage.label(labelmap[bbox] == index, structure=FOUR_CONNECTED)
        if count > 1:
            flagged.append(index)
    return tuple(flagged)


def _from_labelmap(labelmap: np.ndarray, check_connectivity: bool) -> Decomposition:
    """Build a Decomposition from labels already remapped to 0..n-1."""
    labelmap = np.asarray(labelmap, dtype=np.int64)
    h, w = labelmap.shape
    flat = labelmap.ravel()
    n = int(flat.max()) + 1

    counts = np.bincount(flat, minlength=n)
    rows, cols = np.divmod(np.arange(flat.size), w)
    barycenters = np.stack(
        [np.bincount(flat, weights=cols, minlength=n) / counts,
         np.bincount(flat, weights=rows, minlength=n) / counts],
        axis=1,
    )
    _, first = np.unique(flat, return_index=True)
    edges, neighbors = _adjacency(labelmap, n)
    disconnected = _disconnected(labelmap) if check_connectivity else ()

    return Decomposition(
        labelmap=labelmap,
        barycenters=barycenters,
        pixel_counts=counts,
        first_raster_pixel=first,
        edges=edges,
        neighbors=neighbors,
        scan_order=np.argsort(first, kind="stable"),
        disconnected=disconnected,
    )


# ============================================================================
# Import / export
# ============================================================================


def import_decomposition(labelmap: LabelMap) -> Decomposition:
    """
    Import an external superpixel label map.

    Labels are remapped to [0, n) preserving their order. Superpixels split into
    several 4-connected islands are kept and listed in ``disconnected``.

    Raises:
        DomainError: Empty label set
    """
    labels = np.asarray(labelmap.labels)
    if labels.size == 0:
        raise DomainError("Cannot import an empty label map")
    _, remapped = np.unique(labels, return_inverse=True)
    decomp = _from_labelmap(remapped.reshape(labels.shape), check_connectivity=True)
    if decomp.disconnected:
        logger.warning(
            "Imported decomposition has %d disconnected superpixel(s)", len(decomp.disconnected)
        )
    return decomp


def pixel_decomposition(height: int, width: int) -> Decomposition:
    """Every pixel its own superpixel, indexed in raster order."""
    if height < 1 or width < 1:
        raise DomainError(f"Invalid image size {height}x{width}")
    return _from_labelmap(np.arange(height * width).reshape(height, width), check_connectivity=False)


def sidecar_path(png_path: Path) -> Path:
    return png_path.with_suffix(".json")


def export_decomposition(decomp: Decomposition, png_path: str | Path) -> tuple[Path, Path]:
    """
    Write a 16-bit label PNG and a sidecar JSON with barycenters, adjacency and scan order.

    Returns:
        (png path, json path)
    """
    png_path = Path(png_path)
    if decomp.size > MAX_EXPORT_SUPERPIXELS:
        raise FormatError(f"{decomp.size} superpixels do not fit a 16-bit label PNG")
    filesystem.write_png(png_path, np.asarray(decomp.labelmap))
    json_path = sidecar_path(png_path)
    filesystem.write_json(
        json_path,
        {
            "n": decomp.size,
            "barycenters": np.asarray(decomp.barycenters).tolist(),
            "adjacency": np.asarray(decomp.edges).tolist(),
            "scan_order": np.asarray(decomp.scan_order).tolist(),
        },
    )
    return png_path, json_path


def load_decomposition(png_path: str | Path) -> Decomposition:
    """
    Load a decomposition exported by export_decomposition (or any label PNG).

    The structure is recomputed from the labels; a sidecar, when present, must agree on n.
    """
    png_path = Path(png_path)
    decomp = import_decomposition(load_labelmap_pixelwise(png_path))
    json_path = sidecar_path(png_path)
    if filesystem.file_exists(json_path):
        sidecar = filesystem.read_json(json_path)
        if int(sidecar.get("n", -1)) != decomp.size:
            raise FormatError(
                f"Sidecar {json_path} lists n={sidecar.get('n')}, label image has {decomp.size}"
            )
    return decomp


def superpixel_labels_from_pixels(labelmap: LabelMap, decomp: Decomposition) -> np.ndarray:
    """
    Per-superpixel labels by majority vote of the pixel labels (ties -> lowest label).

    Raises:
        DomainError: Size mismatch
    """
    if labelmap.shape != decomp.source_image_size:
        raise DomainError(
            f"Label map {labelmap.shape} does not match decomposition {decomp.source_image_size}"
        )
    num_labels = labelmap.num_labels
    votes = np.bincount(
        np.asarray(decomp.labelmap).ravel() * num_labels + np.asarray(labelmap.labels).ravel(),
        minlength=decomp.size * num_labels,
    ).reshape(decomp.size, num_labels)
    return np.argmax(votes, axis=1)


# ============================================================================
# SLIC
# ============================================================================


def _gradient_energy(data: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(data, axis=(0, 1))
    return np.sum(gx**2 + gy**2, axis=2)


def _seed_grid(h: int, w: int, k: int) -> tuple[int, int]:
    """Rows and columns of the seed grid.

    The cell count stays within GRID_COUNT_SLACK of k where any grid allows it;
    among those grids the one with the squarest cells wins.
    """
    slack = int(GRID_COUNT_SLACK * k)
    candidates = []
    for ny in range(1, min(h, k) + 1):
        nx = min(w, max(1, round(k / ny)))
        error = abs(ny * nx - k)
        aspect = abs(math.log((h / ny) / (w / nx)))
        candidates.append(((max(0, error - slack), aspect, error), ny, nx))
    _, ny, nx = min(candidates)
    return ny, nx


def _seed_centers(
    data: np.ndarray, ny: int, nx: int, jitter: float, rng: np.random.Generator
) -> np.ndarray:
    h, w, _ = data.shape
    if jitter > 0:
        oy, ox = rng.uniform(-0.5, 0.5, size=2) * jitter * np.array([h / ny, w / nx])
    else:
        oy, ox = 0.0, 0.0
    ys = np.clip(np.round((np.arange(ny) + 0.5) * h / ny + oy), 0, h - 1).astype(int)
    xs = np.clip(np.round((np.arange(nx) + 0.5) * w / nx + ox), 0, w - 1).astype(int)

    energy = _gradient_energy(data)
    taken: set[tuple[int, int]] = set()
    seeds = []
    for y in ys:
        for x in xs:
            y0, y1 = max(0, y - 1), min(h, y + 2)
            x0, x1 = max(0, x - 1), min(w, x + 2)
            window = energy[y0:y1, x0:x1]
            best = (int(y), int(x))
            if window.min() < energy[y, x]:
                dy, dx = np.unravel_index(np.argmin(window), window.shape)
                candidate = (y0 + int(dy), x0 + int(dx))
                if candidate not in taken:
                    best = candidate
            if best in taken:
                continue
            taken.add(best)
            seeds.append(best)
    return np.array(seeds, dtype=np.float64)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected part of each label; absorb the rest into neighbors.

    Orphan parts (and unassigned pixels, label -1) join the adjacent superpixel with
    the most pixels, ties to the lowest index. Returns labels remapped to 0..n-1.
    """
    labels = labels.copy()
    for index, bbox in enumerate(ndimage.find_objects(labels + 1)):
        if bbox is None:
            continue
        parts, count = ndimage.label(labels[bbox] == index, structure=FOUR_CONNECTED)
        if count > 1:
            sizes = np.bincount(parts.ravel())[1:]
            keep = int(np.argmax(sizes)) + 1
            sub = labels[bbox]
            sub[(parts > 0) & (parts != keep)] = -1

    h, w = labels.shape
    sizes = np.bincount(labels[labels >= 0].ravel(), minlength=int(labels.max()) + 1)
    while True:
        orphans, count = ndimage.label(labels < 0, structure=FOUR_CONNECTED)
        if count == 0:
            break
        progressed = False
        for part, bbox in enumerate(ndimage.find_objects(orphans), start=1):
            if bbox is None:
                continue
            r0, r1 = max(0, bbox[0].start - 1), min(h, bbox[0].stop + 1)
            c0, c1 = max(0, bbox[1].start - 1), min(w, bbox[1].stop + 1)
            mask = orphans[r0:r1, c0:c1] == part
            ring = ndimage.binary_dilation(mask, structure=FOUR_CONNECTED) & ~mask
            around = labels[r0:r1, c0:c1][ring]
            around = np.unique(around[around >= 0])
            if around.size == 0:
                continue
            target = int(around[np.argmax(sizes[around])])
            labels[r0:r1, c0:c1][mask] = target
            sizes[target] += int(mask.sum())
            progressed = True
        if not progressed:
            raise DomainError("Connectivity enforcement found no superpixel to absorb orphans")

    _, remapped = np.unique(labels, return_inverse=True)
    return remapped.reshape(labels.shape)


def _split_until(labels: np.ndarray, minimum: int) -> np.ndarray:
    """Halve the largest superpixel across its longer extent until there are ``minimum``.

    Each split adds exactly one 4-connected superpixel; labels must already be connected.
    """
    while int(labels.max()) + 1 < minimum:
        largest = int(np.argmax(np.bincount(labels.ravel())))
        ys, xs = np.nonzero(labels == largest)
        coords = ys if np.ptp(ys) >= np.ptp(xs) else xs
        upper = coords > (int(coords.min()) + int(coords.max())) / 2
        labels = labels.copy()
        labels[ys[upper], xs[upper]] = int(labels.max()) + 1
        labels = _enforce_connectivity(labels)
    return labels


def slic_decompose(
    image: ImageGrid,
    k: int,
    compactness: float = 0.1,
    iterations: int = 10,
    rng: RandomSource | None = None,
    jitter: float = 0.0,
) -> Decomposition:
    """
    Decompose an image into roughly k superpixels with a SLIC-style clustering.

    Distance is ||color||^2 + (compactness / S)^2 ||xy||^2 with S = sqrt(hw / k).
    Seeds sit on a regular grid of about k cells, moved to the lowest-gradient pixel
    of their 3x3 window. ``jitter`` shifts the whole grid by up to that fraction of a
    cell using rng. Clusters lost during the iterations are made up by splitting the
    largest superpixels, so the result has between 0.8k and 1.2k superpixels.

    Args:
        image: Image to decompose
        k: Target superpixel count, 1 <= k <= pixel count
        compactness: Spatial weight in color units per grid step
        iterations: Assignment/update rounds
        rng: Random source (only used when jitter > 0)
        jitter: Grid offset fraction in [0, 1)

    Raises:
        DomainError: k out of range
    """
    h, w = image.shape
    if k < 1:
        raise DomainError(f"Superpixel count must be >= 1, got {k}")
    if k > h * w:
        raise DomainError(f"Superpixel count {k} exceeds pixel count {h * w}")
    if k == h * w:
        return pixel_decomposition(h, w)

    data = np.asarray(image.data)
    generator = (rng or RandomSource(0)).substream(0)
    step = math.sqrt(h * w / k)
    spatial = (compactness / step) ** 2
    ny, nx = _seed_grid(h, w, k)
    half = int(math.ceil(max(h / ny, w / nx)))

    seeds = _seed_centers(data, ny, nx, jitter, generator)
    cy, cx = seeds[:, 0].copy(), seeds[:, 1].copy()
    colors = data[cy.astype(int), cx.astype(int)].copy()
    rows, cols = np.mgrid[0:h, 0:w]
    labels = np.full((h, w), -1, dtype=np.int64)

    for _ in range(iterations):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for c in range(len(cy)):
            y0, y1 = max(0, int(cy[c]) - half), min(h, int(cy[c]) + half + 1)
            x0, x1 = max(0, int(cx[c]) - half), min(w, int(cx[c]) + half + 1)
            diff = data[y0:y1, x0:x1] - colors[c]
            dist = np.sum(diff * diff, axis=2) + spatial * (
                (rows[y0:y1, x0:x1] - cy[c]) ** 2 + (cols[y0:y1, x0:x1] - cx[c]) ** 2
            )
            closer = dist < best[y0:y1, x0:x1]
            best[y0:y1, x0:x1][closer] = dist[closer]
            labels[y0:y1, x0:x1][closer] = c

        assigned = labels >= 0
        flat = labels[assigned]
        counts = np.bincount(flat, minlength=len(cy))
        present = counts > 0
        cy[present] = (np.bincount(flat, weights=rows[assigned], minlength=len(cy)) / np.maximum(counts, 1))[present]
        cx[present] = (np.bincount(flat, weights=cols[assigned], minlength=len(cy)) / np.maximum(counts, 1))[present]
        for ch in range(data.shape[2]):
            mean = np.bincount(flat, weights=data[:, :, ch][assigned], minlength=len(cy)) / np.maximum(counts, 1)
            colors[present, ch] = mean[present]

    labels = _split_until(_enforce_connectivity(labels), math.ceil(MIN_COUNT_RATIO * k))
    decomp = _from_labelmap(labels, check_connectivity=False)
    logger.info("SLIC produced %d superpixels (target %d)", decomp.size, k)
    return decomp
