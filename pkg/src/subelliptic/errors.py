"""Exception hierarchy shared by all modules."""


class SubellipticError(Exception):
    """Base class; the CLI maps every subclass to exit code 1."""

    code = "error"


class NonSkewMatrix(SubellipticError):
    code = "non_skew_matrix"


class DegenerateJ(SubellipticError):
    code = "degenerate_j"


class BadDimension(SubellipticError):
    code = "bad_dimension"


class BadExponent(SubellipticError):
    code = "bad_exponent"


class KindMismatch(SubellipticError):
    code = "kind_mismatch"


class OriginSingularity(SubellipticError):
    code = "origin_singularity"


class FDStepUnderflow(SubellipticError):
    code = "fd_step_underflow"


class ExponentOutOfRange(SubellipticError):
    code = "exponent_out_of_range"


class BudgetExhausted(SubellipticError):
    code = "budget_exhausted"

    def __init__(self, msg, estimate=None):
        super().__init__(msg)
        self.estimate = estimate


class NonConvergence(SubellipticError):
    code = "non_convergence"


class UnusableSamples(SubellipticError):
    code = "unusable_samples"


class SupportLeak(SubellipticError):
    code = "support_leak"


class DegenerateFamily(SubellipticError):
    code = "degenerate_family"


class InsufficientCurve(SubellipticError):
    code = "insufficient_curve"


class NoConvergence(SubellipticError):
    code = "no_convergence"


class ParseError(SubellipticError):
    code = "parse_error"


class UnknownKey(SubellipticError):
    code = "unknown_key"


class RangeError(SubellipticError):
    code = "range_error"


class IoError(SubellipticError):
    code = "io_error"
