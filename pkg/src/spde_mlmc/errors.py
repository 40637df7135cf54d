"""Exception types shared across the package."""


class UsageError(ValueError):
    """Invalid arguments or configuration. The CLI maps this to exit code 2."""


class CapacityError(UsageError):
    """A refinement level whose step or node count exceeds 64-bit integer range."""


class NumericalError(RuntimeError):
    """Numerical failure (singular solve, non-finite state). CLI exit code 3."""
