"""Exception types shared across the package."""


class QcError(Exception):
    """Base class for package errors."""


class SingularConfigurationError(QcError):
    """A bond length collapsed below the guard threshold."""


class BranchCutError(QcError):
    """Predictor evaluated on its branch cut (or at the singular core/tip)."""


class DomainMismatchError(QcError):
    """Fields defined on incompatible site/node sets."""


class CoverageError(QcError):
    """A lattice site inside the computational domain is not covered by the mesh."""


class TooThinBlendError(QcError):
    """Blend annulus narrower than two lattice layers."""


class DomainTooSmallError(QcError):
    """Region expansion would run past the computational domain boundary."""


class UnsupportedSchemeError(QcError):
    """Operation not defined for this coupling scheme (e.g. GRAC beyond nearest neighbors)."""


class NonconvergenceError(QcError):
    """Solver failed to reach the requested residual tolerance.

    Carries the last iterate and the achieved residual norm.
    """

    def __init__(self, message, last_iterate=None, residual_norm=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm
        self.iterations = iterations


class DomainLimitReached(QcError):
    """Domain enlargement would exceed the configured R_max (stop condition)."""


class ConfigError(QcError):
    """Invalid run configuration (CLI exit code 3)."""
