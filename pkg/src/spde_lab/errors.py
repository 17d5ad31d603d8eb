"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class GridMismatchError(ValueError):
    """Two objects were built on different space-time grids."""


class QuadratureError(RuntimeError):
    """A quadrature rule produced a non-finite or unreliable value."""


class SeriesCertificateError(ArithmeticError):
    """A series could not be certified convergent at the requested truncation."""


class InfiniteVarianceError(ArithmeticError):
    """A Monte Carlo estimator failed its finite-variance diagnostic."""


class ConfigError(ValueError):
    """An experiment configuration is malformed."""
