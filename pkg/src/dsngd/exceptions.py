"""Exception hierarchy shared across the package."""


class DSNGDError(Exception):
    """Base class for all errors raised by this package."""


class SpecError(DSNGDError, ValueError):
    """A model specification or configuration violates its invariants."""


class DomainError(DSNGDError, ValueError):
    """A point lies outside the domain of a potential (non-finite value)."""


class ConvexityError(DSNGDError):
    """A Bregman divergence came out negative beyond numerical slack."""


class NotPositiveDefiniteError(DSNGDError, ValueError):
    """Cholesky factorisation of a supposedly SPD matrix failed."""


class InversionError(DSNGDError):
    """Inverting the gradient map of a potential did not converge."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class InteriorityError(DSNGDError, ValueError):
    """Expectation parameters fell outside the interior of the dual domain (strict mode)."""


class DivergenceError(DSNGDError):
    """Optimizer iterate became non-finite or exceeded the magnitude guard.

    ``trace`` holds the partial run trace when raised from a full run.
    """

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace
