"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid grid, kernel, or solver configuration."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed to reach its tolerance."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature could not certify the requested tolerance."""


class ConservationError(RuntimeError):
    """A conserved-quantity gate was violated during time evolution."""
