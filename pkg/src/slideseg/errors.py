"""Exception types shared across the pipeline."""


class SlideSegError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SlideSegError):
    """Unreadable or malformed input data."""


class UnsupportedFormatError(SlideSegError):
    """Input file format not supported (e.g. non-RGB raster)."""


class BoundsError(SlideSegError):
    """Region or index outside the valid range."""


class ConsistencyError(SlideSegError):
    """Cross-object mismatch: wrong dims, stale record, duplicate index."""


class ConfigError(SlideSegError):
    """Invalid configuration value or combination."""


class SizeError(SlideSegError):
    """Image too small for the requested operation."""


class CapabilityError(SlideSegError):
    """Backend does not support the requested operation."""


class BackendFailure(SlideSegError):
    """External backend process died, timed out, or could not be reached.

    ``unprocessed`` carries the patch indices whose results were lost.
    """

    def __init__(self, message, unprocessed=None):
        super().__init__(message)
        self.unprocessed = list(unprocessed) if unprocessed else []


class ProtocolError(SlideSegError):
    """External backend sent a malformed or out-of-contract response."""


class NumericError(SlideSegError):
    """Non-finite value where a finite one is required."""


class UndefinedMetricError(SlideSegError):
    """Metric has no defined value for these inputs (e.g. empty mask)."""


class DegenerateTestError(SlideSegError):
    """Statistical test cannot be run (e.g. all paired differences zero)."""


class DegenerateClusteringError(SlideSegError):
    """Clustering objective undefined (empty cluster or zero dispersion)."""


class PlacementError(SlideSegError):
    """Phantom geometry could not be placed within the retry budget."""
