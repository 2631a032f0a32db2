"""Exception types shared across the toolkit."""


class DQError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DQError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(DQError, ValueError):
    """A hyperparameter or argument is outside its legal range."""


class ContractError(DQError, RuntimeError):
    """An internal precondition was violated (caller bug)."""


class VocabularyError(DQError, ValueError):
    """A token or symbol is not in the vocabulary."""


class ConfigurationError(DQError, ValueError):
    """Model / corpus / plan configurations do not fit together."""


class AlignmentError(DQError, ValueError):
    """Logits and labels are misaligned."""


class MetricError(DQError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty reference)."""


class CheckpointError(DQError, IOError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class BadVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class TruncatedCheckpointError(CheckpointError):
    """File ended before all declared records were read."""


class CorruptionError(CheckpointError):
    """Record contents are internally inconsistent (bad dtype, code range...)."""
