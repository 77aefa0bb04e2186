"""Exception hierarchy for spmatch.

CLI commands map these onto exit codes:
- DomainError / ConfigError -> 2 (validation)
- ImageIOError / FormatError / StaleCacheError -> 3 (IO)
- anything else -> 4 (internal)
"""


class SpmatchError(Exception):
    """Base class for all spmatch errors."""


class DomainError(SpmatchError, ValueError):
    """An operation was called outside its domain (bad index, empty input, size mismatch)."""


class ConfigError(DomainError):
    """Invalid configuration value or config file."""


class ConfigMismatchError(DomainError):
    """Test image and library were featured with different configurations."""


class FormatError(SpmatchError, ValueError):
    """Unsupported or malformed file format."""


class ImageIOError(SpmatchError, OSError):
    """A raster or label file could not be read or written."""


class StaleCacheError(SpmatchError):
    """A feature cache exists but its key does not match the current inputs."""
