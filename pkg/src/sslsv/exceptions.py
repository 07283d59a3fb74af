"""Exception types raised across the package."""


class AudioFormatError(ValueError):
    """WAV file is not 16 kHz / 16-bit / mono PCM."""


class FormatError(ValueError):
    """Serialized stream is corrupt, truncated or has the wrong version."""


class ShapeError(ValueError):
    """Array or parameter shapes do not chain / match."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""
