"""Shared exception types."""


class TaxposedError(Exception):
    """Base class for all package errors."""


class DegenerateConfigurationError(TaxposedError):
    """Weighted point set is collinear/coincident; rigid fit has no unique solution."""


class SegmentMismatchError(TaxposedError):
    """Distribution lengths disagree with segment point counts."""


class EmptySegmentError(TaxposedError):
    """A point cloud is missing action or anchor points."""


class LengthMismatchError(TaxposedError):
    """Two probability vectors have different lengths."""


class PlacementFailureError(TaxposedError):
    """Rejection sampling could not place a shape without collisions."""


class OcclusionFailureError(TaxposedError):
    """Occlusion retries failed to keep the required number of points."""


class InsufficientPointsError(TaxposedError):
    """Downsampling to n requested with fewer than n points available."""


class VersionMismatchError(TaxposedError):
    """Serialized file carries an unsupported format version."""


class NonFiniteLossError(TaxposedError):
    """Training produced a NaN/Inf loss."""
