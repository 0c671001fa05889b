"""Exception hierarchy shared by every module."""


class EvonasError(Exception):
    """Base class for all package errors."""


class ConfigError(EvonasError, ValueError):
    """Invalid hyperparameter or configuration value."""


class StructuralError(EvonasError, ValueError):
    """Shapes, spaces or genomes that do not fit together."""


class UsageError(EvonasError, RuntimeError):
    """API called in the wrong order or with out-of-range arguments."""


class DataError(EvonasError, ValueError):
    """Malformed dataset contents or labels."""


class CorruptFileError(EvonasError, IOError):
    """Checkpoint or dataset file that fails integrity checks."""


class VersionMismatchError(CorruptFileError):
    """Checkpoint written by an incompatible format version."""
