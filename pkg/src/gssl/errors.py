"""Exception hierarchy; ``exit_code`` drives the CLI's return value."""


class GSSLError(Exception):
    exit_code = 2
    code = "error"


class DataError(GSSLError):
    """Bad input data: empty labels, unreachable components, corrupt files."""

    exit_code = 2
    code = "data-error"


class EmptyLabelsError(DataError):
    code = "empty-labels"


class UnreachableComponentError(DataError):
    code = "unreachable-component"

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = components or []


class IDXError(DataError):
    code = "bad-idx"


class MissingDataError(DataError):
    code = "missing-idx"


class MemoryGuardError(DataError):
    code = "memory-guard"


class ConvergenceError(GSSLError):
    """A numerical method stopped before reaching its tolerance."""

    exit_code = 3
    code = "non-convergence"

    def __init__(self, message, residual=float("nan"), result=None):
        super().__init__(message)
        self.residual = residual
        self.result = result


class CensoredError(ConvergenceError):
    code = "all-censored"

    def __init__(self, message, censored_fraction=1.0):
        super().__init__(message)
        self.censored_fraction = censored_fraction


class QuadratureError(ConvergenceError):
    code = "quadrature"
