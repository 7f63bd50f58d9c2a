"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto distinct exit codes, so new
errors should subclass one of them rather than ``Exception`` directly.
"""


class HsprojError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HsprojError, ValueError):
    """Invalid configuration or hyperparameters."""


class DataError(HsprojError, ValueError):
    """Input data violates a documented contract."""


class RuntimeFailure(HsprojError, RuntimeError):
    """A computation failed while running (non-finite values, aborted training)."""


# -- tensor / model contracts -------------------------------------------------

class DimensionError(ConfigurationError):
    """Operand shapes are incompatible."""


class ContractError(DataError):
    """A caller broke an operation precondition (e.g. non-scalar backward root)."""


class EmptySequenceError(DataError):
    """Every position of a sequence is masked out."""


class SequenceLengthError(DataError):
    """A sequence is longer than the positional table supports."""


class DegenerateInputError(DataError):
    """Input has no direction (zero vector) and cannot be normalized."""


# -- persistence ----------------------------------------------------------------

class DecodeError(DataError):
    """A binary file could not be decoded."""


class VersionError(DecodeError):
    """File format version is not the one this build reads."""


class CorruptionError(DecodeError):
    """File is truncated or fails its checksum."""


class CacheMiss(HsprojError, LookupError):
    """Requested trace is not present in the cache (not an error in the data)."""


# -- training -------------------------------------------------------------------

class NonFiniteError(RuntimeFailure):
    """A loss or gradient became NaN or infinite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingAborted(RuntimeFailure):
    """Training stopped early; ``last_checkpoint`` points at the last good state."""

    def __init__(self, message, last_checkpoint=None, diagnostics=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.diagnostics = diagnostics or {}
