"""Exception types shared across the package."""


class TprlabError(Exception):
    """Base class for all package errors."""


class ParseError(TprlabError):
    """A data file row could not be parsed."""


class IntegrityError(TprlabError):
    """A loaded artifact violates a structural invariant."""


class ConfigError(TprlabError):
    """Invalid configuration or insufficient data for the requested setup."""


class TrainingDiverged(TprlabError):
    """The training objective became non-finite."""


class ArtifactError(TprlabError):
    """A required pipeline artifact is missing or inconsistent."""
