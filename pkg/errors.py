"""Exception hierarchy shared by every elastiq module."""


class ElastiqError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ElastiqError, ValueError):
    """Raised when tensor shapes do not line up."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ArgumentError(ElastiqError, ValueError):
    """Raised for invalid arguments (bad ranges, empty inputs, unknown modes)."""


class UnsupportedBitError(ElastiqError, ValueError):
    """Raised when a bit-width is outside the calibrated set or lacks state."""

    def __init__(self, bits, layer=None, supported=None):
        where = f" for layer '{layer}'" if layer else ""
        allowed = f"; supported bits are {sorted(supported)}" if supported else ""
        super().__init__(f"unsupported bit-width {bits}{where}{allowed}")
        self.bits = bits
        self.layer = layer


class InfeasibleBudgetError(ElastiqError, ValueError):
    """Raised when an average-bit budget cannot be met by any allocation."""


class InstanceTooLargeError(ElastiqError, ValueError):
    """Raised when an exhaustive search would exceed its size limit."""


class ConfigError(ElastiqError, ValueError):
    """Raised for invalid environment or manifest configuration."""


class DataError(ElastiqError, ValueError):
    """Raised when evaluation data does not fit the model."""


class ArtifactError(ElastiqError, IOError):
    """Base class for artifact load failures."""


class FormatVersionError(ArtifactError):
    """Raised when an artifact was written by an unknown format version."""


class TruncatedBlobError(ArtifactError):
    """Raised when a tensor blob extends past the end of the file."""


class ChecksumError(ArtifactError):
    """Raised when a tensor blob does not match its recorded checksum."""
