"""Exception hierarchy shared across the codec."""


class PlyParseError(ValueError):
    """Malformed PLY header or body."""


class RangeError(ValueError):
    """A coordinate does not fit the declared voxel resolution."""


class ConfigError(ValueError):
    """Invalid codec, model or dictionary configuration."""


class TrainingError(RuntimeError):
    """Optimization diverged; ``step`` holds the offending step index."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ThresholdError(RuntimeError):
    """Every threshold probe produced an empty reconstruction."""


class QuantizationError(ValueError):
    """Quantized weight does not fit in a signed 32-bit integer."""


class BitstreamError(ValueError):
    """Base class for every decode failure."""


class CorruptStreamError(BitstreamError):
    """Payload is truncated, inconsistent, or fails its checksum."""

    def __init__(self, message, offset=None, section=None):
        parts = [message]
        if section is not None:
            parts.append(f"section={section}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts) if len(parts) > 1 else message)
        self.offset = offset
        self.section = section


class BadMagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    pass


class ChecksumError(CorruptStreamError):
    pass


class EvaluationError(ValueError):
    """RD curves are too short or do not overlap."""
