class ExtractError(Exception):
    """Base class for extraction failures."""


class EncoderUnavailable(ExtractError):
    """The requested encoder cannot be constructed in this environment."""


class InvalidCorruption(ExtractError):
    """Corruption spec is malformed or outside the supported ranges."""
