"""
Shared CLI utilities and base classes.

This module provides common functionality used across all CLI command modules:
- The custom Click group that lists every command's options in help
- Shared option decorators and config resolution (file < flags)
- Error-to-exit-code mapping
- Logging setup and the resolved-config sidecar
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, NoReturn, TypeVar

import click

from spmatch import config as spmatch_config
from spmatch.adapters import filesystem
from spmatch.domain.errors import DomainError, FormatError, ImageIOError, StaleCacheError
from spmatch.domain.models import DistanceParams, RunConfig
from spmatch.services.library import load_featured_image, load_library
from spmatch.services.spm import ExemplarLibrary, FeaturedImage
from spmatch.services.superpatch import default_distance_params

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_INTERNAL = 4

RESOLVED_CONFIG_NAME = "config.resolved.json"


class CustomGroup(click.Group):
    """
    Custom Click Group that shows all command options in help.

    This extends Click's default Group class to provide more detailed help
    output, including options for each subcommand.
    """

    def format_help(self, ctx: click.Context, formatter: click.HelpFormatter) -> None:
        """Format the complete help output."""
        self.format_usage(ctx, formatter)
        self.format_help_text(ctx, formatter)
        self.format_options(ctx, formatter)
        self.format_commands_with_options(ctx, formatter)
        self.format_epilog(ctx, formatter)

    def format_commands_with_options(
        self,
        ctx: click.Context,
        formatter: click.HelpFormatter,
    ) -> None:
        """List all commands with their options."""
        commands = self.list_commands(ctx)
        if not commands:
            return

        formatter.write_paragraph()
        formatter.write_text("Commands:")
        formatter.write_paragraph()

        for subcommand in commands:
            cmd = self.get_command(ctx, subcommand)
            if cmd is None:
                continue

            help_text = cmd.get_short_help_str(limit=80)
            formatter.write_text(f"  {subcommand}")
            if help_text:
                formatter.write_text(f"    {help_text}")

            for param in (p for p in cmd.params if isinstance(p, click.Option)):
                opts = ", ".join(param.opts)
                default = ""
                if param.default is not None and not isinstance(param.default, bool):
                    default = f" [default: {param.default}]"
                formatter.write_text(f"      {opts}  {param.help or ''}{default}")

            formatter.write_paragraph()


# ============================================================================
# Logging and errors
# ============================================================================


def configure_logging(verbosity: int) -> None:
    """-v gives INFO, -vv DEBUG; otherwise only warnings reach stderr."""
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def fail(message: str, code: int) -> NoReturn:
    click.echo(f"Error: {message}", err=True)
    sys.exit(code)


def handle_errors(func: F) -> F:
    """Map spmatch errors to exit codes: 2 validation, 3 IO, 4 internal."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except click.ClickException:
            raise
        except (ImageIOError, FormatError, StaleCacheError) as e:
            fail(str(e), EXIT_IO)
        except DomainError as e:
            fail(str(e), EXIT_VALIDATION)
        except OSError as e:
            fail(str(e), EXIT_IO)
        except Exception as e:  # noqa: BLE001
            logger.debug("Internal error", exc_info=True)
            fail(f"internal error: {e}", EXIT_INTERNAL)
        return None

    return wrapper  # type: ignore[return-value]


# ============================================================================
# Options and configuration
# ============================================================================


def _apply(options: list[Callable[[F], F]], f: F) -> F:
    for option in reversed(options):
        f = option(f)
    return f


def common_options(f: F) -> F:
    """--config and the decomposition/feature flags every pipeline command shares."""
    return _apply(
        [
            click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Config file (key = value)"),
            click.option("--seed", type=int, help="Random seed"),
            click.option("--threads", type=int, help="Worker threads (default: CPU count); only numpy work overlaps"),
            click.option(
                "--feature",
                type=click.Choice(["mean-color", "cumulative-histogram", "orientation-histogram", "concat"]),
                help="Superpixel descriptor",
            ),
            click.option("--bins", type=int, help="Histogram bins per channel"),
            click.option("--color", type=click.Choice(["rgb", "gray"]), help="Feature color space"),
            click.option("--superpixels", type=int, help="Superpixels per image when decomposing"),
            click.option("--compactness", type=float, help="SLIC spatial weight"),
            click.option("--jitter", type=float, help="SLIC seed grid offset (fraction of a step)"),
            click.option("--no-cache", "no_cache", is_flag=True, help="Do not read or write caches"),
            click.option("--rebuild-cache", is_flag=True, help="Recompute stale feature caches"),
        ],
        f,
    )


def search_options(f: F) -> F:
    """Input paths and superpatch search flags."""
    return _apply(
        [
            click.argument("images", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False)),
            click.option(
                "-l", "--library", required=True, type=click.Path(exists=True, dir_okay=False),
                help="Library manifest (JSON array)",
            ),
            click.option("--decomposition", type=click.Path(exists=True, dir_okay=False), help="Test label PNG"),
            click.option("-o", "--out", type=click.Path(file_okay=False), default="out", help="Output directory"),
            click.option("-k", "--k", "k", type=int, help="Independent searches"),
            click.option("-R", "--radius", type=float, help="Superpatch radius in pixels"),
            click.option("--iters", type=int, help="Search iterations"),
            click.option("--sigma1", type=float, help="Pair offset scale (default: half superpixel spacing)"),
            click.option("--sigma2", type=float, help="Center distance scale (default: sqrt(2) R)"),
            click.option("--metric", type=click.Choice(["euclidean", "sqeuclidean"]), help="Feature distance"),
            common_options,
        ],
        f,
    )


FLAG_KEYS = {
    "k": "k",
    "radius": "radius",
    "iters": "iters",
    "seed": "seed",
    "sigma1": "sigma1",
    "sigma2": "sigma2",
    "metric": "metric",
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "epsilon": "epsilon",
    "labels": "labels",
    "feature": "feature",
    "bins": "bins",
    "color": "color",
    "neighborhood": "neighborhood",
    "max_sweeps": "max-sweeps",
    "threads": "threads",
    "superpixels": "superpixels",
    "compactness": "compactness",
    "slic_iters": "slic-iters",
    "jitter": "jitter",
}


def resolve_config(config_path: str | None, flags: dict[str, Any]) -> tuple[RunConfig, str | None]:
    """
    Defaults < config file < flags.

    Returns:
        (validated RunConfig, path of the config file used or None)
    """
    explicit = Path(config_path) if config_path else None
    values = spmatch_config.load_config(explicit)
    overrides = {FLAG_KEYS[name]: value for name, value in flags.items() if name in FLAG_KEYS}
    if flags.get("no_cache"):
        overrides["cache"] = False
    values = spmatch_config.merge_overrides(values, overrides)
    return spmatch_config.build_run_config(values), spmatch_config.get_config_path(explicit)


def write_resolved_config(out_dir: Path, config: RunConfig, config_file: str | None) -> Path:
    """Echo the resolved configuration next to the outputs."""
    path = out_dir / RESOLVED_CONFIG_NAME
    filesystem.write_json(path, {"config_file": config_file, "run": json.loads(config.model_dump_json())})
    return path


def prepare_search(
    images: tuple[str, ...],
    library_path: str,
    decomposition: str | None,
    config: RunConfig,
    rebuild: bool,
) -> tuple[FeaturedImage, ExemplarLibrary, DistanceParams]:
    """Load the library and the test image, and derive distance parameters."""
    library = load_library(library_path, config, rebuild=rebuild)
    test = load_featured_image(images, config, decomposition=decomposition, rebuild=rebuild)
    distance = default_distance_params(
        test.decomposition,
        config.spm.radius,
        metric=config.metric,
        sigma1=config.sigma1,
        sigma2=config.sigma2,
    )
    logger.info(
        "sigma1=%.3f sigma2=%.3f R=%.2f over %d library superpixels",
        distance.sigma1, distance.sigma2, config.spm.radius, library.total_superpixels,
    )
    return test, library, distance
