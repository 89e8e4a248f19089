class VotrError(Exception):
    """Base class for errors raised by this package."""


class EmptyVoxelSetError(VotrError, ValueError):
    pass


class PointFileError(VotrError, ValueError):
    pass


class ConfigError(VotrError, ValueError):
    pass


class TableFullError(VotrError, RuntimeError):
    pass


class LookupMismatchError(VotrError, AssertionError):
    """Hash-backed and scan lookups disagreed."""
