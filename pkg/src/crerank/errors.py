"""Exception hierarchy. ``kind`` is the one-word class the CLI prints on failure."""


class CrerankError(Exception):
    kind = "internal"


class FormatError(CrerankError):
    """Unsupported, corrupted or mismatched on-disk data."""

    kind = "format"


class ConfigError(CrerankError, ValueError):
    kind = "config"


class EmptyCorpusError(CrerankError):
    kind = "training"


class EmptyTrainingSetError(CrerankError):
    kind = "training"


class DivergenceError(CrerankError, FloatingPointError):
    kind = "training"


class ConsistencyError(CrerankError):
    kind = "internal"
