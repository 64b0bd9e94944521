"""Exception hierarchy for SegVid."""


class SegVidError(Exception):
    """Base class for all SegVid errors."""


class ShapeError(SegVidError, ValueError):
    """Tensor or feature dimensions do not agree."""


class FormatError(SegVidError):
    """A file on disk is malformed, truncated or inconsistent with the manifest."""


class ConfigError(SegVidError, ValueError):
    """Invalid hyperparameters or arguments."""
