"""Exception hierarchy shared by all modules."""


class CrushedIceError(Exception):
    """Base class for every error raised by this package."""


class DomainError(CrushedIceError, ValueError):
    """An argument lies outside the domain of a formula."""


class LayoutError(CrushedIceError, ValueError):
    """A hole layout violates the security-distance rule."""


class ResolutionError(CrushedIceError, ValueError):
    """A hole or cutoff is not resolved by the grid."""


class GridMismatchError(CrushedIceError, ValueError):
    """Two masks or functions do not live on the same grid."""


class SizeLimitError(CrushedIceError, ValueError):
    """A dense computation was requested above the configured size limit."""


class NotPSDError(CrushedIceError, ValueError):
    """A form matrix is not symmetric positive semidefinite."""


class SpectralGapError(CrushedIceError, ValueError):
    """An interval endpoint lies too close to the spectrum."""


class ConfigError(CrushedIceError, ValueError):
    """A configuration file failed to parse or validate."""


class ConvergenceError(CrushedIceError, RuntimeError):
    """An iterative method stopped before reaching its tolerance.

    Parameters
    ----------
    message : str
    best : array-like or None
        Best iterate found (or the converged subset of eigenvalues).
    residual : float
        Residual attained by ``best``.
    """

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual
