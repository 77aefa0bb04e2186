"""Oracle command: compare the superpatch search with exhaustive matching."""

from __future__ import annotations

import json
from pathlib import Path

import click

from spmatch.adapters import filesystem
from spmatch.app.cli.base import handle_errors, prepare_search, resolve_config, search_options, write_resolved_config
from spmatch.services.harness import brute_force_match, format_report_table, oracle_report, stage_timer
from spmatch.services.imaging import RandomSource
from spmatch.services.spm import save_ann_field, spm_search


@click.command()
@search_options
@click.option("--tolerance", type=float, default=1.05, help="Ratio counted as 'within' the oracle")
@handle_errors
def oracle(images, library, decomposition, out, tolerance, config_path, rebuild_cache, no_cache, **flags):
    """
    Run the search and an exhaustive oracle, and report distance ratios.

    Writes oracle.jsonl (one {"i", "oracle", "spm", "ratio"} line per superpixel)
    and oracle_report.json with quantiles.

    Examples:

        spmatch oracle face.png -l library.json --k 8 --radius 16
    """
    config, config_file = resolve_config(config_path, {**flags, "no_cache": no_cache})
    out_dir = Path(out)
    timings: dict[str, float] = {}

    test, lib, distance = prepare_search(images, library, decomposition, config, rebuild_cache)
    with stage_timer(timings, "search"):
        ann = spm_search(test, lib, config.spm, distance, RandomSource(config.spm.seed))
    with stage_timer(timings, "oracle"):
        exact = brute_force_match(test, lib, config.spm.radius, distance, threads=config.spm.threads)

    report = oracle_report(ann, exact, tolerance=tolerance)
    save_ann_field(ann, out_dir / "ann.jsonl")
    filesystem.write_jsonl(out_dir / "oracle.jsonl", (entry.model_dump_json() for entry in report.entries))
    summary = json.loads(report.model_dump_json(exclude={"entries"}))
    summary["wall_time_sec"] = timings
    filesystem.write_json(out_dir / "oracle_report.json", summary)
    write_resolved_config(out_dir, config, config_file)

    click.echo(format_report_table(report))
