"""Configuration management for spmatch.

The config file is a flat ``key = value`` text file. Keys are the long CLI flag
names without leading dashes; CLI flags override file values.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from pydantic import ValidationError

from spmatch.adapters import filesystem
from spmatch.domain.errors import ConfigError
from spmatch.domain.models import (
    DecomposeParams,
    FeatureBlock,
    FeatureConfig,
    FusionParams,
    RandomSearchParams,
    RegularizationParams,
    RunConfig,
    SpmParams,
)

CONFIG_FILENAME = "spmatch.conf"

# Default configuration
DEFAULT_CONFIG: dict[str, Any] = {
    "k": 1,
    "radius": 0.0,
    "iters": 5,
    "seed": 0,
    "sigma1": None,
    "sigma2": None,
    "metric": "euclidean",
    "alpha": 2.0,
    "beta": 4.0,
    "gamma": 0.5,
    "epsilon": 1e-12,
    "labels": 3,
    "feature": "mean-color",
    "bins": 16,
    "orientation-bins": 9,
    "color": "rgb",
    "blocks": "mean-color:1,orientation-histogram:1",
    "neighborhood": "adjacency",
    "max-sweeps": 10,
    "threads": None,
    "superpixels": 250,
    "compactness": 0.1,
    "slic-iters": 10,
    "jitter": 0.0,
    "cache": True,
}


def find_config_file(explicit: Path | None = None) -> Path | None:
    """
    Find the spmatch.conf file.

    Searches in order:
    1. An explicitly given path
    2. Current directory
    3. ~/.spmatch/spmatch.conf

    Returns:
        Path to config file if found, None otherwise
    """
    if explicit is not None:
        if not filesystem.file_exists(explicit):
            raise ConfigError(f"Config file not found: {explicit}")
        return explicit

    local_config = Path(CONFIG_FILENAME)
    if filesystem.file_exists(local_config):
        return local_config

    home_config = Path.home() / ".spmatch" / CONFIG_FILENAME
    if filesystem.file_exists(home_config):
        return home_config

    return None


def _coerce(raw: str) -> Any:
    value = raw.strip()
    lowered = value.lower()
    if lowered in ("none", "null", ""):
        return None
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def parse_config_text(text: str) -> dict[str, Any]:
    """
    Parse flat ``key = value`` lines.

    Args:
        text: Config file contents

    Returns:
        Mapping of keys to coerced values

    Raises:
        ConfigError: On a line without '=' or an unknown key
    """
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw)
    return values


def load_config(path: Path | None = None) -> dict[str, Any]:
    """
    Load configuration from file merged over defaults.

    Args:
        path: Explicit config file; when None the search order of find_config_file applies

    Returns:
        Configuration dictionary with all keys present
    """
    config = DEFAULT_CONFIG.copy()
    config_file = find_config_file(path)
    if config_file is None:
        return config

    try:
        text = filesystem.read_text_sync(config_file)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {config_file}: {e}") from e

    config.update(parse_config_text(text))
    return config


def merge_overrides(config: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Apply CLI flag values over a loaded config; None means 'flag not given'."""
    merged = dict(config)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _parse_blocks(value: Any) -> tuple[FeatureBlock, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(FeatureBlock.model_validate(b) for b in value)
    blocks = []
    for part in str(value).split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, weight = part.partition(":")
        blocks.append(FeatureBlock(kind=kind.strip(), weight=float(weight) if weight else 1.0))  # type: ignore[arg-type]
    return tuple(blocks)


def build_run_config(config: dict[str, Any]) -> RunConfig:
    """
    Validate a flat configuration into a RunConfig.

    Args:
        config: Flat mapping (defaults, file values and flag overrides merged)

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: If any value is out of range or of the wrong type
    """
    try:
        beta = config["beta"]
        if isinstance(beta, str) and beta.strip().lower() in ("inf", "infinity"):
            beta = float("inf")
        return RunConfig(
            feature=FeatureConfig(
                kind=config["feature"],
                bins=config["bins"],
                orientation_bins=config["orientation-bins"],
                color=config["color"],
                blocks=_parse_blocks(config["blocks"]),
            ),
            spm=SpmParams(
                radius=config["radius"],
                k=config["k"],
                iterations=config["iters"],
                seed=config["seed"],
                random_search=RandomSearchParams(),
                threads=config["threads"],
            ),
            sigma1=config["sigma1"],
            sigma2=config["sigma2"],
            metric=config["metric"],
            fusion=FusionParams(
                alpha=config["alpha"],
                beta=beta,
                epsilon=config["epsilon"],
                num_labels=config["labels"],
            ),
            regularization=RegularizationParams(
                gamma=config["gamma"],
                neighborhood=config["neighborhood"],
                max_sweeps=config["max-sweeps"],
            ),
            decompose=DecomposeParams(
                superpixels=config["superpixels"],
                compactness=config["compactness"],
                iterations=config["slic-iters"],
                jitter=config["jitter"],
            ),
            cache=bool(config["cache"]),
        )
    except (ValidationError, ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def get_config_path(explicit: Path | None = None) -> str | None:
    """Get the path to the config file being used, if any."""
    config_file = find_config_file(explicit)
    return str(config_file) if config_file else None
