"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so new failure modes should subclass one
of the three roots below rather than raising bare ``Exception``.
"""


class PolymomError(Exception):
    """Root of all library errors."""


class InvalidArgument(PolymomError, ValueError):
    pass


class DomainError(PolymomError, ValueError):
    """Parameters outside a family's valid domain, or an unsupported family."""


class RangeError(PolymomError, ArithmeticError):
    """A computed moment overflowed 64-bit floating point."""


class BudgetExceeded(PolymomError):
    """A sample or enumeration budget was exceeded.

    ``value`` carries the quantity that was requested.
    """

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class InfeasibleBox(PolymomError):
    pass


class EstimationFailed(PolymomError):
    pass


class MatchingAmbiguous(EstimationFailed):
    pass


class AssemblyIncomplete(EstimationFailed):
    pass


class UndefinedForSingleton(InvalidArgument):
    pass
