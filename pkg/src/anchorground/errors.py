"""Exception hierarchy. The CLI prints the class name as the machine-parsable error tag."""


class GroundingError(Exception):
    """Base class for every error raised by this package."""


class DomainError(GroundingError, ValueError):
    """An input lies outside the domain of an operation."""


class DimensionError(GroundingError, ValueError):
    """Inconsistent tensor or model dimensions."""


class MissingRowsError(GroundingError):
    """A strategy needs attention rows that the trace does not carry."""


class CheckpointError(GroundingError):
    """Malformed, truncated or incompatible checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


class GenerationError(GroundingError):
    """Scene generation could not satisfy its constraints."""


class CorpusError(GroundingError):
    """A corpus or manifest record failed to parse."""


class ConfigError(GroundingError, ValueError):
    pass


class NonFiniteLossError(GroundingError, FloatingPointError):
    pass


class GradCheckFailed(GroundingError):
    """Analytic and finite-difference gradients disagree beyond tolerance."""
