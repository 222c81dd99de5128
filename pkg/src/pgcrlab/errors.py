"""Exception types shared across the package.

Invalid arguments raise plain ``ValueError``; the classes here cover the two
failure kinds callers need to tell apart.
"""


class PreconditionError(ValueError):
    """An operation was called on inputs that violate its contract.

    Raised, for example, when back-door adjustment is requested for a set
    that does not satisfy the back-door criterion.
    """


class NumericError(ArithmeticError):
    """Training or inference produced a non-finite value."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
