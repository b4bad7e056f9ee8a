"""Exception types shared across the package."""


class MgicError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MgicError, ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(MgicError, ValueError):
    """A layer, block or experiment was configured inconsistently."""


class ContractError(MgicError, RuntimeError):
    """An API precondition was violated by the caller."""


class NumericalError(MgicError, ArithmeticError):
    """Non-finite values were produced.

    ``index`` is the flat coordinate at which the problem was detected, when
    one is known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceError(NumericalError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, last_good_epoch=None, parameter=None):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch
        self.parameter = parameter


class FormatError(MgicError, ValueError):
    """A binary file (IDX, checkpoint) is malformed.

    ``offset`` is the byte offset where decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptionError(FormatError):
    """Checkpoint checksum mismatch or truncation."""


class VersionError(FormatError):
    """Checkpoint written by an unknown format version."""


class SchemaError(ConfigurationError):
    """Experiment config failed schema validation.

    ``pointer`` is a JSON pointer to the offending node.
    """

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class DataError(MgicError, ValueError):
    """Dataset contents are inconsistent with the requested task."""
