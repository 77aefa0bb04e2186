"""Labeling command: search, label fusion, regularization and optional evaluation."""

from __future__ import annotations

import json
from pathlib import Path

import click

from spmatch.adapters import filesystem
from spmatch.app.cli.base import (
    EXIT_VALIDATION,
    fail,
    handle_errors,
    prepare_search,
    resolve_config,
    search_options,
    write_resolved_config,
)
from spmatch.services.decompose import superpixel_labels_from_pixels
from spmatch.services.harness import evaluate_labeling, format_report_table, stage_timer
from spmatch.services.imaging import RandomSource, load_labelmap_pixelwise, save_labelmap
from spmatch.services.labeling import (
    argmax_label,
    expand_to_pixels,
    export_probability_maps,
    label_fusion,
    regularize,
)
from spmatch.services.spm import save_ann_field, spm_search


@click.command()
@search_options
@click.option("--alpha", type=float, help="Distance scaling of fusion weights")
@click.option("--beta", type=str, help="Position prior scaling ('inf' disables)")
@click.option("--gamma", type=float, help="Edge weight scale of the regularization")
@click.option("--epsilon", type=float, help="Offset added to the minimum distance")
@click.option("--labels", "labels", type=int, help="Number of labels M")
@click.option("--neighborhood", type=click.Choice(["adjacency", "superpatch"]), help="Regularization graph")
@click.option("--max-sweeps", type=int, help="Alpha-expansion sweep cap")
@click.option("--regularize/--no-regularize", "do_regularize", default=True, help="Run graph regularization")
@click.option("--truth", type=click.Path(exists=True, dir_okay=False), help="Pixel ground truth (PNG or CSV)")
@handle_errors
def label(images, library, decomposition, out, do_regularize, truth, config_path, rebuild_cache, no_cache, **flags):
    """
    Label a test image from a labeled exemplar library.

    Writes prob_<m>.png and probabilities.csv, labels_argmax.png, labels.png
    and, with --truth, metrics.json.

    Examples:

        spmatch label face.png -l library.json --k 50 --radius 50

        spmatch label face.png -l library.json --beta inf --truth face_gt.png
    """
    config, config_file = resolve_config(config_path, {**flags, "no_cache": no_cache})
    out_dir = Path(out)
    timings: dict[str, float] = {}

    test, lib, distance = prepare_search(images, library, decomposition, config, rebuild_cache)
    if not lib.is_labeled:
        fail("every library entry needs a 'labels' map for labeling", EXIT_VALIDATION)

    with stage_timer(timings, "search"):
        ann = spm_search(test, lib, config.spm, distance, RandomSource(config.spm.seed))
    with stage_timer(timings, "fusion"):
        fusion = label_fusion(ann, test, lib, config.fusion)
        initial = argmax_label(fusion)
    labeling = initial
    if do_regularize:
        reg = config.regularization
        with stage_timer(timings, "regularization"):
            labeling = regularize(
                fusion,
                test.decomposition,
                test.features,
                gamma=reg.gamma,
                neighborhood=reg.neighborhood,
                radius=config.spm.radius,
                metric=config.metric,
                max_sweeps=reg.max_sweeps,
            )

    save_ann_field(ann, out_dir / "ann.jsonl")
    export_probability_maps(fusion, test.decomposition, out_dir)
    save_labelmap(expand_to_pixels(initial, test.decomposition), out_dir / "labels_argmax.png")
    save_labelmap(expand_to_pixels(labeling, test.decomposition), out_dir / "labels.png")
    write_resolved_config(out_dir, config, config_file)
    if labeling.energy_trace:
        filesystem.write_json(out_dir / "energy.json", {"trace": list(labeling.energy_trace)})

    click.echo(f"Labeled {len(labeling)} superpixels -> {out_dir / 'labels.png'}")

    if truth is None:
        return

    truth_pixels = load_labelmap_pixelwise(truth)
    truth_superpixels = superpixel_labels_from_pixels(truth_pixels, test.decomposition)
    report = evaluate_labeling(
        labeling,
        test.decomposition,
        truth_superpixels=truth_superpixels,
        truth_pixels=truth_pixels,
        fusion=fusion,
        num_labels=config.fusion.num_labels,
    )
    report = report.model_copy(
        update={"wall_time_sec": timings, "distance_evaluations": int(ann.evaluations.sum())}
    )
    filesystem.write_json(out_dir / "metrics.json", json.loads(report.model_dump_json()))
    click.echo(format_report_table(report))
