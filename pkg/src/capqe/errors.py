"""Exception hierarchy.

Every error raised on bad data derives from :class:`QEError`, which the CLI
maps to exit code 1.
"""


class QEError(Exception):
    """Base class for data and validation errors."""


class DuplicateKey(QEError):
    def __init__(self, key, line=None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate key {key!r}{where}")


class MalformedRecord(QEError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}:"
        if line is not None:
            prefix += f"{line}: "
        elif prefix:
            prefix += " "
        super().__init__(prefix + message)


class ParseError(MalformedRecord):
    pass


class NoOverlap(QEError):
    pass


class DimensionMismatch(QEError, ValueError):
    def __init__(self, field, expected, got, sample_id=None):
        self.sample_id = sample_id
        self.field = field
        self.expected = expected
        self.got = got
        who = f"sample {sample_id!r}: " if sample_id is not None else ""
        super().__init__(f"{who}{field} has dimension {got}, expected {expected}")


class NonFiniteValue(QEError, ValueError):
    pass


class NonFiniteIntermediate(QEError, FloatingPointError):
    pass


class StorageError(QEError, OSError):
    """Raised for refused or failed writes (e.g. overwrite without ``force``)."""


class TooFewImages(QEError):
    pass


class VersionMismatch(QEError):
    pass


class CorruptCheckpoint(QEError):
    pass


class MissingTarget(QEError):
    pass


class LengthMismatch(QEError, ValueError):
    pass


class ShapeMismatch(QEError, ValueError):
    pass


class EmptyDataset(QEError):
    pass


class NonFiniteLoss(QEError, FloatingPointError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class NonSquare(QEError, ValueError):
    pass


class ConstantVector(QEError, ValueError):
    pass


class KeyMismatch(QEError):
    pass


class NoPositives(QEError):
    pass


class TooFewPoints(QEError):
    pass


class NoQualifyingPoint(QEError):
    pass
