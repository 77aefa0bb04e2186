"""Decomposition command: SLIC superpixels exported as a 16-bit label PNG plus sidecar JSON."""

from __future__ import annotations

from pathlib import Path

import click

from spmatch.app.cli.base import common_options, handle_errors, resolve_config, write_resolved_config
from spmatch.services.decompose import export_decomposition, slic_decompose
from spmatch.services.imaging import RandomSource, load_image_stack


@click.command()
@click.argument("images", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-k", "--k", "count", type=int, help="Target superpixel count")
@click.option("--slic-iters", type=int, help="SLIC iterations")
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="Label PNG path (default: <image>.sp.png)")
@common_options
@handle_errors
def decompose(images, count, slic_iters, out, config_path, rebuild_cache, no_cache, **flags):
    """
    Decompose an image (or aligned single-channel stack) into superpixels.

    Examples:

        spmatch decompose face.png --k 250

        spmatch decompose t1.png t2.png flair.png --k 400 -o brain.sp.png
    """
    flags.update(slic_iters=slic_iters, superpixels=count if count is not None else flags.get("superpixels"))
    config, config_file = resolve_config(config_path, flags)

    image = load_image_stack([Path(p) for p in images])
    params = config.decompose
    decomp = slic_decompose(
        image,
        params.superpixels,
        compactness=params.compactness,
        iterations=params.iterations,
        rng=RandomSource(config.spm.seed),
        jitter=params.jitter,
    )

    png_path = Path(out) if out else Path(images[0]).with_suffix(".sp.png")
    png_path, json_path = export_decomposition(decomp, png_path)
    write_resolved_config(png_path.parent, config, config_file)

    click.echo(f"Wrote {png_path} and {json_path} ({decomp.size} superpixels)")
