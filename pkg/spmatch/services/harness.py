"""
Harness service - evaluation metrics, exhaustive oracles and displacement fields.

This service provides:
- brute_force_match: exact minimum superpatch distance over the whole library
- best_of_k and oracle reports (SPM distance against the exact minimum)
- Superpixel/pixel accuracy, Dice and ROC/AUC (scikit-learn)
- Displacement fields, flow rendering (scikit-image HSV) and affine residuals
- Stage timing and human-readable report tables
"""

from __future__ import annotations

import logging
import math
import os
import time
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np
from skimage.color import hsv2rgb
from sklearn.metrics import auc, roc_curve

from spmatch.domain.errors import DomainError
from spmatch.domain.models import DistanceParams, MetricsReport, OracleEntry, OracleReport, RocCurve
from spmatch.domain.types import (
    AnnField,
    Decomposition,
    DisplacementField,
    ImageGrid,
    LabelFusionMap,
    Labeling,
    LabelMap,
    Match,
)
from spmatch.services.labeling import expand_to_pixels
from spmatch.services.spm import ExemplarLibrary, FeaturedImage, SearchContext

logger = logging.getLogger(__name__)

ORACLE_TOLERANCE = 1.05


# ============================================================================
# Oracle
# ============================================================================


def _exhaustive(ctx: SearchContext, i: int) -> Match:
    best = Match(-1, -1, math.inf)
    for image_id, entry in enumerate(ctx.library.entries):
        for sp in range(entry.size):
            d = ctx.evaluate(i, image_id, sp)
            if d < best.distance:
                best = Match(image_id, sp, d)
    if best.image_id < 0:
        best = Match(0, 0, math.inf)
    return best


def brute_force_match(
    test: FeaturedImage,
    library: ExemplarLibrary,
    radius: float,
    distance: DistanceParams | None = None,
    threads: int | None = None,
) -> list[Match]:
    """
    Exact minimum-distance match for every test superpixel.

    Ties go to the lowest (image id, superpixel id). Test superpixels are
    spread over a thread pool, which overlaps the numpy distance work only;
    the per-candidate loop holds the GIL.
    """
    ctx = SearchContext.build(test, library, radius, distance)
    indices = range(test.size)
    workers = threads or os.cpu_count() or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda i: _exhaustive(ctx, i), indices))
    return [_exhaustive(ctx, i) for i in indices]


def best_of_k(ann: AnnField) -> list[Match]:
    """Minimum-distance match per superpixel; ties go to the lowest (image, superpixel)."""
    return [min(ann.matches(i), key=lambda m: (m.distance, m.image_id, m.superpixel_id)) for i in range(ann.size)]


def oracle_report(ann: AnnField, oracle: Sequence[Match], tolerance: float = ORACLE_TOLERANCE) -> OracleReport:
    """
    Compare each superpixel's best-of-k distance with the exact minimum.

    ratio = spm / oracle; a zero oracle gives ratio 1 when the search also
    reached zero, inf otherwise.
    """
    if len(oracle) != ann.size:
        raise DomainError(f"{len(oracle)} oracle matches for {ann.size} superpixels")
    entries = []
    within = 0
    for i, (found, exact) in enumerate(zip(best_of_k(ann), oracle)):
        if exact.distance > 0:
            ratio = found.distance / exact.distance
        else:
            ratio = 1.0 if found.distance == 0 else math.inf
        within += found.distance <= tolerance * exact.distance
        entries.append(OracleEntry(i=i, oracle=exact.distance, spm=found.distance, ratio=ratio))

    ratios = np.array([e.ratio for e in entries])
    quantiles = {
        "p50": float(np.quantile(ratios, 0.5)),
        "p90": float(np.quantile(ratios, 0.9)),
        "max": float(ratios.max()),
    }
    return OracleReport(
        entries=entries,
        quantiles=quantiles,
        fraction_within=within / len(entries) if entries else 1.0,
        tolerance=tolerance,
    )


# ============================================================================
# Metrics
# ============================================================================


def accuracy_metrics(
    pred: Labeling,
    truth_superpixels: np.ndarray | None,
    truth_pixels: LabelMap | None,
    decomp: Decomposition,
) -> tuple[float | None, float | None]:
    """
    Superpixel accuracy and pixel accuracy (after expansion to pixels).

    Either truth may be None, which leaves the matching accuracy None.

    Raises:
        DomainError: Size mismatch
    """
    if len(pred) != decomp.size:
        raise DomainError(f"{len(pred)} predicted labels for {decomp.size} superpixels")
    superpixel_accuracy = None
    pixel_accuracy = None
    if truth_superpixels is not None:
        truth = np.asarray(truth_superpixels)
        if truth.shape != (decomp.size,):
            raise DomainError(f"Expected {decomp.size} truth labels, got {truth.shape}")
        superpixel_accuracy = float(np.mean(np.asarray(pred.labels) == truth))
    if truth_pixels is not None:
        if truth_pixels.shape != decomp.source_image_size:
            raise DomainError(
                f"Truth map {truth_pixels.shape} does not match decomposition {decomp.source_image_size}"
            )
        expanded = expand_to_pixels(pred, decomp)
        pixel_accuracy = float(np.mean(expanded.labels == truth_pixels.labels))
    return superpixel_accuracy, pixel_accuracy


def dice(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """2|X & Y| / (|X| + |Y|); 1 when both masks are empty."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    truth_mask = np.asarray(truth_mask, dtype=bool)
    if pred_mask.shape != truth_mask.shape:
        raise DomainError(f"Mask shapes differ: {pred_mask.shape} vs {truth_mask.shape}")
    total = int(pred_mask.sum()) + int(truth_mask.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred_mask, truth_mask).sum()) / total


def dice_per_label(pred: LabelMap, truth: LabelMap, num_labels: int) -> dict[int, float]:
    """Dice of every label in [0, num_labels) at pixel scale."""
    return {m: dice(pred.labels == m, truth.labels == m) for m in range(num_labels)}


def roc_auc(fusion: LabelFusionMap, truth: np.ndarray, label: int) -> RocCurve:
    """
    ROC sweep over L_label with ``label`` as the positive class; AUC by trapezoids.

    With fewer than two labels, or only one class present in truth, the curve is
    empty and the AUC is NaN.
    """
    truth = np.asarray(truth)
    positives = truth == label
    if fusion.num_labels < 2 or positives.all() or not positives.any():
        return RocCurve(thresholds=[], tpr=[], fpr=[], auc=math.nan)
    scores = np.asarray(fusion.probabilities)[:, label]
    fpr, tpr, thresholds = roc_curve(positives.astype(int), scores)
    return RocCurve(
        thresholds=[float(t) for t in thresholds],
        tpr=[float(t) for t in tpr],
        fpr=[float(f) for f in fpr],
        auc=float(auc(fpr, tpr)),
    )


def evaluate_labeling(
    pred: Labeling,
    decomp: Decomposition,
    truth_superpixels: np.ndarray | None = None,
    truth_pixels: LabelMap | None = None,
    fusion: LabelFusionMap | None = None,
    num_labels: int | None = None,
) -> MetricsReport:
    """Assemble a MetricsReport from whatever ground truth is available."""
    if fusion is not None and len(fusion) != decomp.size:
        raise DomainError(f"{len(fusion)} probability rows for {decomp.size} superpixels")
    superpixel_accuracy, pixel_accuracy = accuracy_metrics(pred, truth_superpixels, truth_pixels, decomp)
    labels = num_labels or (fusion.num_labels if fusion is not None else int(np.max(pred.labels)) + 1)

    dice_scores: dict[int, float] = {}
    if truth_pixels is not None:
        dice_scores = dice_per_label(expand_to_pixels(pred, decomp), truth_pixels, labels)

    roc: dict[int, RocCurve] = {}
    if fusion is not None and truth_superpixels is not None and fusion.num_labels >= 2:
        for m in range(fusion.num_labels):
            curve = roc_auc(fusion, truth_superpixels, m)
            if math.isnan(curve.auc):
                logger.debug("Skipping ROC for label %d: single class in truth", m)
                continue
            roc[m] = curve

    return MetricsReport(
        superpixel_accuracy=superpixel_accuracy,
        pixel_accuracy=pixel_accuracy,
        dice=dice_scores,
        roc=roc,
    )


@contextmanager
def stage_timer(timings: dict[str, float], stage: str) -> Iterator[None]:
    """Record the wall-clock seconds of a block under ``stage``."""
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - start


# ============================================================================
# Displacement
# ============================================================================


def displacement_field(ann: AnnField, test: FeaturedImage, library: ExemplarLibrary) -> DisplacementField:
    """
    Best-of-k matched barycenter minus source barycenter, per test superpixel.

    Matches in differently sized images are scaled into the test frame first.
    """
    h, w = test.decomposition.source_image_size
    sources = np.asarray(test.decomposition.barycenters)
    vectors = np.zeros((ann.size, 2))
    for i, match in enumerate(best_of_k(ann)):
        decomp = library[match.image_id].decomposition
        mh, mw = decomp.source_image_size
        x, y = decomp.barycenters[match.superpixel_id]
        target = (x, y) if (mh, mw) == (h, w) else ((x + 0.5) * w / mw - 0.5, (y + 0.5) * h / mh - 0.5)
        vectors[i] = (target[0] - sources[i, 0], target[1] - sources[i, 1])
    return DisplacementField(vectors)


def render_flow(field: DisplacementField, decomp: Decomposition) -> ImageGrid:
    """
    Color each superpixel by its displacement: hue = angle, saturation = magnitude / max.

    Zero displacement renders white.
    """
    vectors = np.asarray(field.vectors)
    if vectors.shape[0] != decomp.size:
        raise DomainError(f"{vectors.shape[0]} vectors for {decomp.size} superpixels")
    magnitudes = field.magnitudes
    peak = float(magnitudes.max()) if magnitudes.size else 0.0
    hue = np.mod(np.arctan2(vectors[:, 1], vectors[:, 0]), 2 * np.pi) / (2 * np.pi)
    saturation = magnitudes / peak if peak > 0 else np.zeros_like(magnitudes)
    hsv = np.stack([hue, saturation, np.ones_like(hue)], axis=1)
    colors = hsv2rgb(hsv[None, :, :])[0]
    return ImageGrid(np.clip(colors[np.asarray(decomp.labelmap)], 0.0, 1.0))


def fit_affine(sources: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least-squares 2x3 affine map with targets ~ A @ [x, y, 1]."""
    sources = np.asarray(sources, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if sources.shape != targets.shape or sources.shape[0] < 3:
        raise DomainError("Affine fit needs at least 3 matching point pairs")
    design = np.hstack([sources, np.ones((sources.shape[0], 1))])
    solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return solution.T


def residual_displacement_std(field: DisplacementField, decomp: Decomposition) -> float:
    """Root-mean-square displacement left after removing the best affine map."""
    sources = np.asarray(decomp.barycenters)
    targets = sources + np.asarray(field.vectors)
    affine = fit_affine(sources, targets)
    predicted = np.hstack([sources, np.ones((sources.shape[0], 1))]) @ affine.T
    residual = targets - predicted
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


# ============================================================================
# Reports
# ============================================================================


def _fmt(value: float | None) -> str:
    if value is None:
        return "-"
    return f"{value:.4f}"


def format_report_table(report: MetricsReport | OracleReport) -> str:
    """Human-readable two-column table of a report."""
    rows: list[tuple[str, str]] = []
    if isinstance(report, MetricsReport):
        rows.append(("superpixel accuracy", _fmt(report.superpixel_accuracy)))
        rows.append(("pixel accuracy", _fmt(report.pixel_accuracy)))
        for label, value in sorted(report.dice.items()):
            rows.append((f"dice[{label}]", _fmt(value)))
        for label, curve in sorted(report.roc.items()):
            rows.append((f"auc[{label}]", _fmt(curve.auc)))
        for stage, seconds in report.wall_time_sec.items():
            rows.append((f"time {stage} (s)", f"{seconds:.3f}"))
        if report.distance_evaluations is not None:
            rows.append(("distance evaluations", str(report.distance_evaluations)))
    else:
        rows.append(("superpixels", str(len(report.entries))))
        for name, value in report.quantiles.items():
            rows.append((f"ratio {name}", _fmt(value)))
        rows.append((f"within {report.tolerance:g}x oracle", _fmt(report.fraction_within)))

    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)
