"""Exception types shared across the package."""


class UlsamError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(UlsamError):
    """A shape, extent, or option is inconsistent with what an operation needs."""


class DirectiveError(ConfigurationError):
    """An attention position directive is malformed or targets an illegal layer."""


class StateError(UlsamError):
    """An operation was called out of order (e.g. backward before forward)."""


class IngestionError(UlsamError):
    """A dataset file is structurally broken (truncated, wrong record size)."""


class DataError(UlsamError):
    """A dataset file parsed but contains invalid values (e.g. label out of range)."""


class CheckpointError(UlsamError):
    """A checkpoint file has a bad magic tag, version, or payload."""
