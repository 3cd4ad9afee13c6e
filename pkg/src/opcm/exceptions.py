"""Exception hierarchy shared by all modules."""


class OPCMError(Exception):
    """Base class for every error raised by this package."""


class MalformedFile(OPCMError, ValueError):
    pass


class NonFiniteValue(OPCMError, ValueError):
    pass


class DuplicateName(OPCMError, ValueError):
    pass


class IoFailure(OPCMError, OSError):
    pass


class SchemaMismatch(OPCMError, ValueError):
    """Two checkpoints differ in names, shapes or parameter kinds."""


class ShapeMismatch(OPCMError, ValueError):
    pass


class EmptySequence(OPCMError, ValueError):
    pass


class MissingCell(OPCMError, ValueError):
    pass


class TooFewTasks(OPCMError, ValueError):
    pass


class BadDims(OPCMError, ValueError):
    pass


class InvariantViolation(OPCMError, AssertionError):
    """A runtime self-check (orthogonality, closed-form equivalence) failed."""
