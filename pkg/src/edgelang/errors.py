"""Exception hierarchy shared across the package."""


class EdgeError(Exception):
    """Base class for all errors raised by this package."""


class DeclError(EdgeError):
    """A tensor or rank declaration violates its invariants."""


class DtypeError(EdgeError):
    """A value does not fit the declared datatype."""


class EvalError(EdgeError):
    """Evaluation of a statement failed (bad operator input, out-of-shape
    target coordinate, SSA violation at run time, ...)."""


class GenerationLimitError(EvalError):
    """The cascade exceeded the configured number of passes."""


class IterationLimitError(EvalError):
    """A single statement touched more iteration-space points than allowed."""


class ValidationError(EdgeError):
    """A program failed validation; carries the diagnostics."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class MatrixMarketError(EdgeError):
    """A MatrixMarket file could not be parsed."""
