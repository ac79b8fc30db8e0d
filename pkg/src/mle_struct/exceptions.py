"""Exception hierarchy shared across the package."""


class MLEStructError(Exception):
    """Base class for all errors raised by this package."""


class StructureError(MLEStructError, ValueError):
    """Array shapes or topology do not conform to the model."""


class DomainError(MLEStructError, ValueError):
    """A value lies outside the domain of a function (e.g. negative marginals)."""


class GradientUndefinedError(DomainError):
    """Gradient requested at a point on the boundary of the polytope."""


class InfeasibleModelError(MLEStructError):
    """The structure set is empty (e.g. a graph with no perfect matching)."""


class SizeLimitError(MLEStructError, ValueError):
    """The instance exceeds the cap of an exhaustive or exponential-time routine."""


class SolverError(MLEStructError, RuntimeError):
    """A MAP solver failed; ``sample`` holds the index of the offending sample."""

    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class InvariantViolation(MLEStructError):
    """A certified inequality or invariant failed beyond its slack."""


class BoundaryError(DomainError):
    """A line-search trial point left the interior where the objective is finite."""
