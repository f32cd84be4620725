"""Exception types shared across the package."""


class ChorebotError(Exception):
    """Base class for all package errors."""


class InvalidPoseError(ChorebotError):
    """Pose failed validation (non-unit quaternion, bad shape)."""


class DegenerateInputError(ChorebotError):
    """Geometric fit is rank deficient (too few or collinear points)."""


class InsufficientDataError(ChorebotError):
    """Not enough samples to perform the requested operation."""


class SyncError(ChorebotError):
    """Streams do not overlap in time; no common resampling grid exists."""


class EmptyEpisodeError(ChorebotError):
    """Resampled episode too short to build any training pair."""


class EmptyDatasetError(ChorebotError):
    """Dataset filters eliminated every log."""


class NumericError(ChorebotError):
    """NaN or Inf appeared during a numeric computation."""


class TransportError(ChorebotError):
    """Critic endpoint unreachable after retries."""


class EndpointError(ChorebotError):
    """Critic endpoint returned a non-2xx HTTP status."""


class FormatError(ChorebotError):
    """File does not conform to the expected on-disk format."""
