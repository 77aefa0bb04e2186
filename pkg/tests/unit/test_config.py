"""Unit tests for configuration loading and resolution."""

import math

import pytest

from spmatch.config import (
    DEFAULT_CONFIG,
    build_run_config,
    find_config_file,
    load_config,
    merge_overrides,
    parse_config_text,
)
from spmatch.domain.errors import ConfigError

pytestmark = pytest.mark.unit


class TestParseConfigText:
    """Test the flat key = value parser."""

    def test_values_are_coerced(self):
        """Test ints, floats, booleans and strings."""
        values = parse_config_text("k = 8\nradius = 12.5\ncache = off\nmetric = sqeuclidean\n")
        assert values == {"k": 8, "radius": 12.5, "cache": False, "metric": "sqeuclidean"}

    def test_comments_and_blank_lines_ignored(self):
        """Test that comments and empty lines are skipped."""
        values = parse_config_text("# search\n\nk = 4  # runs\n")
        assert values == {"k": 4}

    def test_none_values(self):
        """Test that 'none' clears a value."""
        assert parse_config_text("sigma1 = none") == {"sigma1": None}

    def test_unknown_key(self):
        """Test that unknown keys are rejected with the line number."""
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("k = 1\nwarp = 9\n")

    def test_missing_equals(self):
        """Test that lines without '=' are rejected."""
        with pytest.raises(ConfigError):
            parse_config_text("k 1")


class TestLoadConfig:
    """Test config file discovery and merging."""

    def test_explicit_file_overrides_defaults(self, tmp_path):
        """Test that file values replace defaults and keep other keys."""
        path = tmp_path / "spmatch.conf"
        path.write_text("k = 50\nradius = 50\n")
        config = load_config(path)
        assert config["k"] == 50
        assert config["radius"] == 50
        assert config["alpha"] == DEFAULT_CONFIG["alpha"]

    def test_missing_explicit_file(self, tmp_path):
        """Test that a missing explicit file is a config error."""
        with pytest.raises(ConfigError, match="not found"):
            find_config_file(tmp_path / "absent.conf")

    def test_no_file_gives_defaults(self, tmp_path, monkeypatch):
        """Test defaults when no config file exists anywhere."""
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("HOME", str(tmp_path))
        assert load_config() == DEFAULT_CONFIG

    def test_merge_ignores_unset_flags(self):
        """Test that None overrides leave values untouched."""
        merged = merge_overrides({"k": 4, "seed": 1}, {"k": None, "seed": 7})
        assert merged == {"k": 4, "seed": 7}


class TestBuildRunConfig:
    """Test validation into a RunConfig."""

    def test_defaults(self):
        """Test the default operating point."""
        config = build_run_config(DEFAULT_CONFIG)
        assert config.spm.k == 1
        assert config.spm.iterations == 5
        assert config.fusion.alpha == 2.0
        assert config.fusion.beta == 4.0
        assert config.regularization.max_sweeps == 10
        assert config.feature.kind == "mean-color"
        assert config.sigma1 is None

    def test_beta_infinity(self):
        """Test that beta accepts 'inf'."""
        config = build_run_config({**DEFAULT_CONFIG, "beta": "inf"})
        assert math.isinf(config.fusion.beta)

    def test_blocks_string(self):
        """Test parsing of concat block weights."""
        config = build_run_config({**DEFAULT_CONFIG, "blocks": "mean-color:2, cumulative-histogram"})
        assert [(b.kind, b.weight) for b in config.feature.blocks] == [
            ("mean-color", 2.0),
            ("cumulative-histogram", 1.0),
        ]

    @pytest.mark.parametrize(
        "key,value",
        [("k", 0), ("radius", -1.0), ("gamma", 0.0), ("metric", "cosine"), ("superpixels", 0)],
    )
    def test_invalid_values(self, key, value):
        """Test that out-of-range values raise ConfigError."""
        with pytest.raises(ConfigError):
            build_run_config({**DEFAULT_CONFIG, key: value})
