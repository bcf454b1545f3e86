"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, NumericalError and
subclasses -> 2, anything I/O related -> 3.
"""


class RelNavError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(RelNavError):
    """Invalid or inconsistent scenario/solver configuration."""


class NumericalError(RelNavError):
    """A numerical operation left its domain of validity."""


class LogBranchError(NumericalError):
    """Rotation logarithm requested too close to the angle-pi branch cut."""


class SingularRadiusError(NumericalError):
    """Spacecraft inside the gravitational exclusion radius of the point mass."""


class CheiralityError(NumericalError):
    """Projected point is behind the camera (non-positive depth)."""


class DegenerateGeometryError(NumericalError):
    """Geometric construction is degenerate (parallel rays, rank-deficient
    correspondences, spin-axis-aligned position, ...)."""


class GraphError(RelNavError):
    """Factor-graph structural violation (duplicate key, dangling reference)."""


class SolverError(NumericalError):
    """Optimizer could not make progress (indefinite system after damping
    escalation, non-finite cost)."""


class InitializationError(RelNavError):
    """Front-end could not initialize the session (too few co-visible
    landmarks, degenerate start geometry)."""
