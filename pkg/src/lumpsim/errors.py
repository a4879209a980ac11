"""Exception hierarchy shared across the package."""


class LumpsimError(Exception):
    """Base class for all package errors."""


class SchemaError(LumpsimError):
    """Description document is malformed (missing or unknown field)."""


class ValidationError(LumpsimError):
    """Description is well-formed but violates a model invariant."""


class DimensionError(LumpsimError):
    """State or input dimensions do not match the model."""


class NoSolution(LumpsimError):
    """Mass-fraction system has no solution (fewer than 3 points)."""


class SingularSystem(LumpsimError):
    """Linear system is singular (e.g. duplicate sample positions)."""


class CompileError(LumpsimError):
    """Robot description cannot be compiled into a runnable model."""


class SingularMass(LumpsimError):
    """Mass matrix is numerically singular."""


class StepFailure(LumpsimError):
    """Adaptive integrator step size underflowed."""


class NonFinite(LumpsimError):
    """State became NaN or infinite during integration."""


class SingularActuation(LumpsimError):
    """Actuator Jacobian is rank deficient at the requested pose."""


class GeometryError(LumpsimError):
    """Degenerate geometry (e.g. coincident attachment points)."""


class SolverSingular(LumpsimError):
    """Constrained step solver matrix is singular."""


class DriftExceeded(LumpsimError):
    """Constraint residual exceeded the configured drift tolerance."""


class RankDeficient(LumpsimError):
    """Regression design matrix is rank deficient."""


class TooFewSamples(LumpsimError):
    """Not enough samples for the number of unknowns."""


class GridMismatch(LumpsimError):
    """Trajectories do not share an overlapping time range."""


class NameCollision(LumpsimError):
    """Generated model element names collide."""


class Mismatch(LumpsimError):
    """Golden-file comparison failed; message carries the diff."""
