"""Exception types shared across the package."""


class OffmbrlError(Exception):
    """Base class for all package errors."""


class ShapeError(OffmbrlError):
    """Tensor or parameter dimensions do not line up."""


class ContractError(OffmbrlError):
    """An operation was called outside its documented preconditions."""


class TrainingError(OffmbrlError):
    """A training step produced a non-finite quantity."""


class FormatError(OffmbrlError):
    """A serialized artifact is corrupt, truncated, or of the wrong version."""


class ConfigError(OffmbrlError):
    """Invalid, unknown, or inconsistent configuration."""


class GenerationError(OffmbrlError):
    """Dataset generation could not satisfy the behavior specification."""


class SamplingError(OffmbrlError):
    """A dataset query has no valid support (e.g. horizon longer than every episode)."""
