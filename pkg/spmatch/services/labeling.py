"""
Labeling service - label fusion over k-ANN matches and graph regularization.

This service provides:
- Fusion weights and per-superpixel label probabilities
- Argmax labeling (ties to the lowest label)
- The regularization energy and its alpha-expansion minimizer (PyMaxflow)
- Expansion of superpixel labels to pixels and probability map export
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import maxflow
import numpy as np
from scipy.spatial import cKDTree

from spmatch.adapters import filesystem
from spmatch.domain.errors import DomainError, FormatError, ImageIOError
from spmatch.domain.models import FusionParams
from spmatch.domain.types import AnnField, Decomposition, FeatureTable, LabelFusionMap, Labeling, LabelMap
from spmatch.services.spm import ExemplarLibrary, FeaturedImage
from spmatch.services.superpatch import RADIUS_TOLERANCE, get_metric

logger = logging.getLogger(__name__)

SUBMODULARITY_TOLERANCE = 1e-12


# ============================================================================
# Fusion
# ============================================================================


def _fusion_exponent(
    d: np.ndarray | float, min_d: np.ndarray | float, spatial: np.ndarray | float, params: FusionParams
) -> np.ndarray:
    h2 = params.alpha**2 * (np.asarray(min_d) + params.epsilon)
    prior = 0.0 if math.isinf(params.beta) else np.asarray(spatial) / params.beta**2
    return 1.0 - (np.asarray(d) / h2 + prior)


def fusion_weight(
    d: float,
    min_d: float,
    c_i: tuple[float, float],
    c_j: tuple[float, float],
    params: FusionParams,
) -> float:
    """
    exp(1 - (D / h^2 + |c_i - c_j| / beta^2)) with h^2 = alpha^2 (min_D + epsilon).

    ``min_d`` is the smallest distance over all k matches of the test superpixel,
    whatever their labels. beta = inf drops the position term.
    """
    spatial = float(np.hypot(c_i[0] - c_j[0], c_i[1] - c_j[1]))
    return float(np.exp(_fusion_exponent(d, min_d, spatial, params)))


def label_fusion(
    ann: AnnField,
    test: FeaturedImage,
    library: ExemplarLibrary,
    params: FusionParams,
) -> LabelFusionMap:
    """
    Per-superpixel label probabilities from the weighted votes of the k matches.

    Weights are normalized per superpixel in log space, so rows sum to 1 even
    when every raw weight would underflow. Matches with non-finite distance
    carry no vote; a superpixel without any vote gets an all-zero row.

    Raises:
        DomainError: Unlabeled exemplar or label outside [0, num_labels)
    """
    if not library.is_labeled:
        raise DomainError("Label fusion needs every exemplar to carry labels")
    for image_id, entry in enumerate(library.entries):
        assert entry.labels is not None
        if entry.labels.size and entry.labels.max() >= params.num_labels:
            raise DomainError(
                f"Exemplar {image_id} has label {int(entry.labels.max())} >= {params.num_labels}"
            )

    n, k = ann.distances.shape
    distances = np.asarray(ann.distances)
    labels = np.empty((n, k), dtype=np.int64)
    targets = np.empty((n, k, 2))
    for image_id in np.unique(ann.image_ids):
        entry = library[int(image_id)]
        mask = ann.image_ids == image_id
        sp = ann.superpixel_ids[mask]
        labels[mask] = entry.labels[sp]  # type: ignore[index]
        targets[mask] = entry.decomposition.barycenters[sp]

    centers = np.asarray(test.decomposition.barycenters)
    spatial = np.linalg.norm(targets - centers[:, None, :], axis=2)
    finite = np.isfinite(distances)
    min_d = np.min(np.where(finite, distances, np.inf), axis=1, keepdims=True)

    with np.errstate(invalid="ignore", divide="ignore"):
        exponent = np.where(finite, _fusion_exponent(distances, min_d, spatial, params), -np.inf)
    row_max = exponent.max(axis=1, keepdims=True)
    voted = np.isfinite(row_max[:, 0])
    weights = np.zeros((n, k))
    weights[voted] = np.exp(exponent[voted] - row_max[voted])

    probabilities = np.zeros((n, params.num_labels))
    rows = np.repeat(np.arange(n), k)
    np.add.at(probabilities, (rows, labels.ravel()), weights.ravel())
    totals = probabilities.sum(axis=1, keepdims=True)
    probabilities[voted] /= totals[voted]
    return LabelFusionMap(probabilities)


def argmax_label(fusion: LabelFusionMap) -> Labeling:
    """Most probable label per superpixel; ties go to the lowest label."""
    return Labeling(np.argmax(np.asarray(fusion.probabilities), axis=1))


# ============================================================================
# Energy
# ============================================================================


def pairwise_edges(
    decomp: Decomposition,
    features: FeatureTable,
    gamma: float,
    neighborhood: str = "adjacency",
    radius: float = 0.0,
    metric: str = "euclidean",
) -> tuple[np.ndarray, np.ndarray]:
    """
    Undirected edges of the regularization graph and their Potts weights.

    "adjacency" uses the 4-adjacency graph; "superpatch" adds every pair of
    superpixels whose barycenters lie within ``radius``. Each edge appears once
    with i < j and weight exp(-d(F_i, F_j) / gamma).
    """
    if gamma <= 0:
        raise DomainError(f"gamma must be > 0, got {gamma}")
    edges = np.asarray(decomp.edges)
    if neighborhood == "superpatch":
        if radius > 0:
            pairs = cKDTree(decomp.barycenters).query_pairs(radius + RADIUS_TOLERANCE, output_type="ndarray")
            edges = np.unique(np.concatenate([edges, np.sort(pairs.reshape(-1, 2), axis=1)]), axis=0)
    elif neighborhood != "adjacency":
        raise DomainError(f"Unknown neighborhood: {neighborhood}")

    values = np.asarray(features.values)
    d = get_metric(metric)(values[edges[:, 0]], values[edges[:, 1]])
    return edges.reshape(-1, 2), np.exp(-d / gamma)


def labeling_energy(
    labels: np.ndarray, probabilities: np.ndarray, edges: np.ndarray, weights: np.ndarray
) -> float:
    """J = sum_i (1 - L_{l_i}(i)) + sum over edges of w_e [l_i != l_j], each edge once."""
    labels = np.asarray(labels)
    probabilities = np.asarray(probabilities)
    data = np.sum(1.0 - probabilities[np.arange(labels.size), labels])
    if edges.size == 0:
        return float(data)
    cut = labels[edges[:, 0]] != labels[edges[:, 1]]
    return float(data + np.sum(weights[cut]))


# ============================================================================
# Alpha-expansion
# ============================================================================


def _expansion_move(
    labels: np.ndarray,
    alpha: int,
    unary: np.ndarray,
    edges: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    """Best labeling reachable by switching any subset of nodes to alpha.

    Node p ends in the sink segment (x_p = 1) when it switches to alpha.
    """
    n = labels.size
    cost1 = unary[np.arange(n), alpha].astype(np.float64)
    cost0 = unary[np.arange(n), labels].astype(np.float64)

    graph = maxflow.Graph[float](n, max(1, edges.shape[0]))
    nodes = graph.add_nodes(n)

    for (p, q), w in zip(edges, weights):
        lp, lq = labels[p], labels[q]
        a = w * (lp != lq)
        b = w * (lp != alpha)
        c = w * (alpha != lq)
        d = 0.0
        if a + d > b + c + SUBMODULARITY_TOLERANCE:
            raise DomainError(f"Non-submodular expansion term on edge ({p}, {q})")
        # E = A + (C - A) x_p + (D - C) x_q + (B + C - A - D)(1 - x_p) x_q
        if c - a > 0:
            cost1[p] += c - a
        else:
            cost0[p] += a - c
        if d - c > 0:
            cost1[q] += d - c
        else:
            cost0[q] += c - d
        pair = b + c - a - d
        if pair > 0:
            graph.add_edge(nodes[p], nodes[q], pair, 0.0)

    shift = np.minimum(cost0, cost1)
    for p in range(n):
        graph.add_tedge(nodes[p], cost1[p] - shift[p], cost0[p] - shift[p])
    graph.maxflow()

    switch = np.array([graph.get_segment(nodes[p]) == 1 for p in range(n)], dtype=bool)
    return np.where(switch, alpha, labels)


def alpha_expansion(
    probabilities: np.ndarray,
    edges: np.ndarray,
    weights: np.ndarray,
    initial: np.ndarray,
    max_sweeps: int = 10,
) -> tuple[np.ndarray, list[float]]:
    """
    Minimize the labeling energy by alpha-expansion sweeps.

    Labels are visited in ascending order; a sweep without any improvement ends
    the loop.

    Returns:
        (labels, energy after the initial labeling and after each sweep)
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    unary = 1.0 - probabilities
    labels = np.array(initial, dtype=np.int64)
    energy = labeling_energy(labels, probabilities, edges, weights)
    trace = [energy]

    for sweep in range(max_sweeps):
        improved = False
        for alpha in range(probabilities.shape[1]):
            proposal = _expansion_move(labels, alpha, unary, edges, weights)
            proposal_energy = labeling_energy(proposal, probabilities, edges, weights)
            if proposal_energy < energy - 1e-12:
                labels, energy = proposal, proposal_energy
                improved = True
        trace.append(energy)
        logger.debug("alpha-expansion sweep %d: J = %.6g", sweep + 1, energy)
        if not improved:
            break
    return labels, trace


def regularize(
    fusion: LabelFusionMap,
    decomp: Decomposition,
    features: FeatureTable,
    gamma: float = 0.5,
    num_labels: int | None = None,
    neighborhood: str = "adjacency",
    radius: float = 0.0,
    metric: str = "euclidean",
    max_sweeps: int = 10,
) -> Labeling:
    """
    Regularize the fused labeling on the superpixel graph.

    Starts from the argmax labeling and never returns a higher energy.

    Args:
        fusion: Label probabilities
        decomp: Test decomposition
        features: Test features (edge weights)
        gamma: Edge weight scale, > 0
        num_labels: Label count; defaults to the probability width
        neighborhood: "adjacency" or "superpatch"
        radius: Superpatch radius for the "superpatch" neighborhood
        metric: Feature metric for edge weights
        max_sweeps: Sweep cap

    Returns:
        Labeling with the per-sweep energy trace
    """
    probabilities = np.asarray(fusion.probabilities)
    if len(fusion) != decomp.size:
        raise DomainError(f"{len(fusion)} probability rows for {decomp.size} superpixels")
    if num_labels is not None and num_labels != fusion.num_labels:
        raise DomainError(f"Expected {num_labels} labels, fusion map has {fusion.num_labels}")

    edges, weights = pairwise_edges(decomp, features, gamma, neighborhood, radius, metric)
    initial = argmax_label(fusion).labels
    labels, trace = alpha_expansion(probabilities, edges, weights, initial, max_sweeps)
    logger.info("Regularization: J %.6g -> %.6g in %d sweep(s)", trace[0], trace[-1], len(trace) - 1)
    return Labeling(labels, energy_trace=tuple(trace))


# ============================================================================
# Pixels and export
# ============================================================================


def expand_to_pixels(labeling: Labeling, decomp: Decomposition) -> LabelMap:
    """Every pixel takes its superpixel's label."""
    if len(labeling) != decomp.size:
        raise DomainError(f"{len(labeling)} labels for {decomp.size} superpixels")
    return LabelMap(np.asarray(labeling.labels)[np.asarray(decomp.labelmap)])


def export_probability_maps(fusion: LabelFusionMap, decomp: Decomposition, out_dir: str | Path) -> list[Path]:
    """
    Write one 16-bit PNG per label (probability scaled to 65535) and the raw (n, M) CSV.

    Returns:
        Written paths, PNGs first
    """
    out_dir = Path(out_dir)
    probabilities = np.asarray(fusion.probabilities)
    written = []
    for m in range(fusion.num_labels):
        path = out_dir / f"prob_{m}.png"
        pixels = probabilities[np.asarray(decomp.labelmap), m]
        filesystem.write_png(path, np.round(pixels * 65535.0).astype(np.int64))
        written.append(path)
    csv_path = out_dir / "probabilities.csv"
    filesystem.write_csv_grid(csv_path, probabilities, fmt="{!r}")
    written.append(csv_path)
    return written


def load_probabilities(path: str | Path) -> LabelFusionMap:
    """Read the raw probability CSV written by export_probability_maps."""
    path = Path(path)
    try:
        text = filesystem.read_text_sync(path)
    except OSError as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e
    try:
        rows = np.array(
            [[float(v) for v in line.split(",")] for line in text.splitlines() if line.strip()],
            dtype=np.float64,
        )
    except ValueError as e:
        raise FormatError(f"Invalid probability CSV {path}: {e}") from e
    return LabelFusionMap(rows)
