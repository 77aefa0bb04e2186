"""Matching command: k-ANN superpatch search against an exemplar library."""

from __future__ import annotations

from pathlib import Path

import click

from spmatch.adapters import filesystem
from spmatch.app.cli.base import handle_errors, prepare_search, resolve_config, search_options, write_resolved_config
from spmatch.services.harness import displacement_field, render_flow, stage_timer
from spmatch.services.imaging import RandomSource, save_image
from spmatch.services.spm import save_ann_field, spm_search

ANN_FILENAME = "ann.jsonl"
FLOW_FILENAME = "flow.png"


@click.command()
@search_options
@click.option("--flow/--no-flow", default=True, help="Render the displacement field as PNG")
@handle_errors
def match(images, library, decomposition, out, flow, config_path, rebuild_cache, no_cache, **flags):
    """
    Find k approximate nearest superpatches for every test superpixel.

    Writes ann.jsonl (one line per superpixel) and, with --flow, flow.png.

    Examples:

        spmatch match face.png -l library.json --k 50 --radius 50

        spmatch match face.png -l library.json --seed 7 -o run7
    """
    config, config_file = resolve_config(config_path, {**flags, "no_cache": no_cache})
    out_dir = Path(out)
    timings: dict[str, float] = {}

    with stage_timer(timings, "load"):
        test, lib, distance = prepare_search(images, library, decomposition, config, rebuild_cache)
    with stage_timer(timings, "search"):
        ann = spm_search(test, lib, config.spm, distance, RandomSource(config.spm.seed))

    save_ann_field(ann, out_dir / ANN_FILENAME)
    if flow:
        field = displacement_field(ann, test, lib)
        save_image(render_flow(field, test.decomposition), out_dir / FLOW_FILENAME)
    write_resolved_config(out_dir, config, config_file)
    filesystem.write_json(
        out_dir / "timing.json",
        {"wall_time_sec": timings, "distance_evaluations": int(ann.evaluations.sum())},
    )

    click.echo(f"Matched {ann.size} superpixels (k={ann.k}) -> {out_dir / ANN_FILENAME}")
    click.echo(f"Search: {timings['search']:.3f}s, {int(ann.evaluations.sum())} distance evaluations")
