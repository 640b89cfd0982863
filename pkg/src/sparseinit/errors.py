"""Exception types raised across the package."""


class SparseInitError(Exception):
    """Base class for every error raised by :mod:`sparseinit`."""


# grid / fields
class NonTilingMesh(SparseInitError, ValueError):
    pass


class GridMismatch(SparseInitError, ValueError):
    pass


class FormatViolation(SparseInitError, ValueError):
    pass


class IoFailure(SparseInitError, OSError):
    pass


# PDE operator
class CoverageGap(SparseInitError, ValueError):
    pass


class SingularSystem(SparseInitError, ArithmeticError):
    pass


class SolveFailure(SparseInitError, ArithmeticError):
    pass


class OutsideDomain(SparseInitError, ValueError):
    pass


class NoConvergence(SparseInitError, RuntimeWarning):
    """Power iteration hit ``maxit`` before settling; issued as a warning."""


# optimizers
class StepSizeViolation(SparseInitError, ValueError):
    pass


class RelaxationViolation(SparseInitError, ValueError):
    pass


class NonFiniteIterate(SparseInitError, ArithmeticError):
    pass


class UnsupportedConfig(SparseInitError, ValueError):
    pass


# enhancement
class EmptyField(SparseInitError, ValueError):
    """The optimizer returned an identically zero control (``beta`` too large)."""


class NoMaxima(SparseInitError, ValueError):
    pass


class SingularGram(SparseInitError, ArithmeticError):
    pass


# experiments / config
class UnknownCase(SparseInitError, ValueError):
    pass


class ParseError(SparseInitError, ValueError):
    pass


class SemanticError(SparseInitError, ValueError):
    pass
