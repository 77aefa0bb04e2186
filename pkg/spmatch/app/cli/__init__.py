"""
spmatch CLI - Main entry point.

This module assembles all CLI commands from individual command modules
and creates the main CLI group with Click.
"""

from __future__ import annotations

import click

from spmatch import __version__
from spmatch.app.cli import decompose as decompose_module
from spmatch.app.cli import evaluate as evaluate_module
from spmatch.app.cli import label as label_module
from spmatch.app.cli import match as match_module
from spmatch.app.cli import oracle as oracle_module
from spmatch.app.cli.base import CustomGroup, configure_logging


@click.group(cls=CustomGroup)
@click.version_option(version=__version__)
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output")
def cli(verbose):
    """spmatch - Superpatch matching and exemplar-based labeling of superpixel images."""
    configure_logging(verbose)


# ============================================================================
# Register Commands
# ============================================================================

cli.add_command(decompose_module.decompose, name="decompose")
cli.add_command(match_module.match, name="match")
cli.add_command(label_module.label, name="label")
cli.add_command(oracle_module.oracle, name="oracle")
cli.add_command(evaluate_module.evaluate, name="eval")


def main():
    """Entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()


__all__ = ["cli", "main"]
