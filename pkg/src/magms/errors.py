"""Exception types shared across the toolkit."""


class MagmsError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(MagmsError):
    """Invalid configuration value, modality mismatch, or bad run setup."""


class ShapeError(MagmsError):
    """Array rank/shape/channel-count disagreement between operands."""


class DataError(MagmsError):
    """Sample or dataset contents violate an invariant (missing modality, bad labels)."""


class DatasetFormatError(MagmsError):
    """On-disk dataset does not match its manifest."""


class GenerationError(MagmsError):
    """Phantom synthesis failed (e.g. structures could not be packed)."""


class CheckpointError(MagmsError):
    """Checkpoint archive is corrupt, incompatible, or from a different config."""


class NonFiniteLossError(MagmsError):
    """Training produced a NaN/Inf loss; carries the offending breakdown."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown
