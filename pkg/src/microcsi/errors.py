"""Exception types shared across the package."""


class MicroCsiError(Exception):
    """Base class for all package errors."""


class ConfigError(MicroCsiError, ValueError):
    """Invalid signal configuration or parameters."""


class ExtractionError(MicroCsiError):
    """Fingerprint extraction failed on the supplied data."""

    def __init__(self, message, tones=()):
        super().__init__(message)
        self.tones = tuple(tones)


class UnknownIdentityError(MicroCsiError, KeyError):
    """Claimed identity has no enrolled fingerprints."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown identity"


class FormatError(MicroCsiError):
    """Malformed or incompatible trace / library file."""

    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index
