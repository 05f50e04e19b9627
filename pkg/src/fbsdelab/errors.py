"""Exception hierarchy shared across the package."""


class FBSDELabError(Exception):
    """Base class for every error raised by fbsdelab."""


class HorizonOrderError(FBSDELabError, ValueError):
    pass


class ZeroStepsError(FBSDELabError, ValueError):
    pass


class CoefficientEvaluationError(FBSDELabError, ArithmeticError):
    """A coefficient map returned a non-finite value."""

    def __init__(self, name, point, value=None):
        self.name = name
        self.point = point
        self.value = value
        super().__init__(f"coefficient {name!r} is non-finite at {point}")


class NumericalFailure(FBSDELabError, ArithmeticError):
    """Base for failures of the numerical schemes (CLI exit code 3)."""


class PicardDivergenceError(NumericalFailure):
    pass


class NonFiniteStateError(NumericalFailure):
    def __init__(self, path, step, what="state"):
        self.path = path
        self.step = step
        super().__init__(f"non-finite {what} on path {path} at step {step}")


class MismatchedNoiseError(FBSDELabError, ValueError):
    pass


class DomainError(FBSDELabError, ValueError):
    pass


class SingularRError(FBSDELabError, ValueError):
    def __init__(self, time):
        self.time = time
        super().__init__(f"control weight R is singular at t={time!r}")


class SpecViolationError(FBSDELabError, ValueError):
    pass


class CertificateFailureError(NumericalFailure):
    pass


class RestrictionError(FBSDELabError, ValueError):
    pass


class ConfigError(FBSDELabError, ValueError):
    """Malformed or invalid experiment configuration (CLI exit code 2)."""
