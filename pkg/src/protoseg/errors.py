"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2,
IoError/FormatError -> 3, NumericalError -> 4, data-level errors -> 5.
"""


class ProtosegError(Exception):
    """Base class for all package errors."""


class ShapeError(ProtosegError):
    """Operand shapes do not conform to an operation's contract."""


class UnsupportedOp(ProtosegError):
    """Unknown operation kind requested from the dispatcher."""


class NumericalError(ProtosegError):
    """Non-finite values or numerically invalid arguments."""


class ConfigError(ProtosegError):
    """Invalid configuration value or malformed config document."""


class RangeError(ProtosegError):
    """Scalar argument outside its documented interval."""


class EmptyMaskError(ProtosegError):
    """A pooling mask selects zero pixels where at least one is required."""


class DataError(ProtosegError):
    """Dataset-level violation: unknown class ids, exhausted pools, ..."""


class FormatError(ProtosegError):
    """Malformed file content (netpbm headers, checkpoint framing, CRC)."""


class IoError(ProtosegError):
    """Filesystem failure while reading or writing artifacts."""


class GenerationError(ProtosegError):
    """Scene synthesis could not satisfy placement constraints."""


class DegenerateError(ProtosegError):
    """A metric or reduction has no valid inputs."""


class DegenerateBatchError(DegenerateError):
    """Every pixel of a batch is ignored; no loss can be formed."""
