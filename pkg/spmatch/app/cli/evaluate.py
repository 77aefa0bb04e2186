"""Evaluation command: metrics of a predicted label map against ground truth."""

from __future__ import annotations

import json
from pathlib import Path

import click

from spmatch.adapters import filesystem
from spmatch.app.cli.base import handle_errors
from spmatch.domain.types import Labeling
from spmatch.services.decompose import load_decomposition, superpixel_labels_from_pixels
from spmatch.services.harness import evaluate_labeling, format_report_table
from spmatch.services.imaging import load_labelmap_pixelwise
from spmatch.services.labeling import load_probabilities


@click.command(name="eval")
@click.argument("prediction", type=click.Path(exists=True, dir_okay=False))
@click.option("--truth", required=True, type=click.Path(exists=True, dir_okay=False), help="Pixel ground truth")
@click.option(
    "--decomposition", required=True, type=click.Path(exists=True, dir_okay=False), help="Superpixel label PNG"
)
@click.option("--probabilities", type=click.Path(exists=True, dir_okay=False), help="probabilities.csv for ROC")
@click.option("--labels", "num_labels", type=int, help="Number of labels M (default: from the maps)")
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="Write metrics JSON here")
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of a table")
@handle_errors
def evaluate(prediction, truth, decomposition, probabilities, num_labels, out, as_json):
    """
    Score a predicted label map: accuracies, Dice per label and ROC/AUC.

    Examples:

        spmatch eval out/labels.png --truth gt.png --decomposition face.sp.png

        spmatch eval out/labels.png --truth gt.png --decomposition face.sp.png \\
            --probabilities out/probabilities.csv --json
    """
    decomp = load_decomposition(decomposition)
    predicted = load_labelmap_pixelwise(prediction)
    truth_pixels = load_labelmap_pixelwise(truth)
    fusion = load_probabilities(probabilities) if probabilities else None
    labels = num_labels or max(predicted.num_labels, truth_pixels.num_labels)

    report = evaluate_labeling(
        Labeling(superpixel_labels_from_pixels(predicted, decomp)),
        decomp,
        truth_superpixels=superpixel_labels_from_pixels(truth_pixels, decomp),
        truth_pixels=truth_pixels,
        fusion=fusion,
        num_labels=labels,
    )
    document = json.loads(report.model_dump_json())
    if out:
        filesystem.write_json(Path(out), document)
    click.echo(json.dumps(document, indent=2) if as_json else format_report_table(report))
