"""Exception types raised by the solvers."""


class LqspdeError(Exception):
    """Base class for solver failures (as opposed to invalid arguments)."""


class IterationLimitError(LqspdeError):
    """Inner fixed-point iteration hit its cap without meeting tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularityError(LqspdeError):
    """A backward solve blew past the overflow guard (expected for blow-up data)."""


class InstabilityError(LqspdeError):
    """A simulated path overflowed; usually means the time grid is too coarse."""

    def __init__(self, message, path_index=None):
        super().__init__(message)
        self.path_index = path_index


class NonConvergenceError(LqspdeError):
    """Outer iteration (quasi-linearization, horizon schedule) did not converge."""

    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


class NumericalPSDError(LqspdeError):
    """An operator that must be positive (semi)definite is numerically not."""


class InternalConsistencyError(LqspdeError):
    """A structural property guaranteed by the algorithm was violated."""


class StationarityError(LqspdeError):
    """A stationary solution failed its residual check."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
