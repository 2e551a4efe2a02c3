"""Exception types shared across holokit."""


class HolokitError(Exception):
    """Base class for all library errors."""


class MalformedPolynomialError(HolokitError):
    """A term list fails the reality or canonical-form checks."""


class PreconditionError(HolokitError):
    """An operation was called outside its documented domain."""


class DegenerateGeometryError(HolokitError):
    """Geometry too thin for the configured tolerances."""


class NotStronglyPseudoconvexError(HolokitError):
    pass


class ConvexityViolationError(HolokitError):
    pass


class TypeMismatchError(HolokitError):
    """All homogeneous parts up to the declared type vanish."""


class NonConvergenceError(HolokitError):
    pass


class BudgetExhaustedError(HolokitError):
    pass
