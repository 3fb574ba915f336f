"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract.

    The message names the offending argument or dimension so callers can fix
    the call site rather than chase a numpy broadcast error downstream.
    """


class VolumeFormatError(ValueError):
    """A volume file could not be parsed."""


class BadMagicError(VolumeFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(VolumeFormatError):
    """File ended before the declared payload was complete."""


class UnsupportedVersionError(VolumeFormatError):
    """File declares a format version or dtype code this reader does not know."""


class CheckpointFormatError(ValueError):
    """A checkpoint archive could not be parsed."""


class ConfigError(ValueError):
    """A run configuration file is malformed or contains unknown keys."""
