"""Exception hierarchy shared by all panfuse modules."""


class PanfuseError(Exception):
    """Base class for every error raised by this package."""


class MaskError(PanfuseError, ValueError):
    """A run-length mask is malformed or cannot be represented."""


class DimensionMismatch(PanfuseError, ValueError):
    """Two rasters that must share a shape do not."""


class FormatError(PanfuseError, ValueError):
    """An on-disk artifact does not follow its documented layout."""


class EncodingError(PanfuseError, ValueError):
    """A value cannot be encoded in the target format."""


class ValidationError(PanfuseError, ValueError):
    """An input violates a data-model invariant."""


class ConfigError(PanfuseError, ValueError):
    """A run configuration is incomplete or points at missing files."""


class GenerationError(PanfuseError, RuntimeError):
    """A synthetic scene specification cannot be realized."""
