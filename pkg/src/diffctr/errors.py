"""Exception types shared across the package."""


class DiffCtrError(Exception):
    """Base class for all package errors."""


class ShapeError(DiffCtrError):
    """Operands with incompatible shapes, or indices out of range."""


class NumericError(DiffCtrError):
    """Non-finite value or invalid numeric domain."""


class DataError(DiffCtrError):
    """Malformed dataset, bad field value, or schema mismatch."""


class ConfigError(DiffCtrError):
    """Bad config file: unknown key, wrong type, missing section."""


class CheckpointError(DiffCtrError):
    """Unreadable, corrupt, or incompatible checkpoint file."""
