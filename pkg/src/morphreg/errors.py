"""Exception types shared across the package."""


class MorphRegError(Exception):
    """Base class for all package-specific errors."""


class GridMismatchError(MorphRegError, ValueError):
    """Two fields that must live on the same grid do not."""


class InvalidParameterError(MorphRegError, ValueError):
    """A configuration value is outside its admissible range."""


class ShootingInstabilityError(MorphRegError, ArithmeticError):
    """Velocity magnitude blew up during geodesic integration."""


class DegenerateStatisticsError(MorphRegError, ArithmeticError):
    """Too few samples to form the neighborhood covariance matrices."""


class MissingLabelsError(MorphRegError, LookupError):
    """Oracle mask estimation requested but no ground-truth masks attached."""


class GridFileError(MorphRegError, ValueError):
    """A grid file failed to parse or validate.

    ``code`` is a stable machine-readable identifier:
    ``malformed-header``, ``length-mismatch``, ``mask-range``,
    ``bad-header-field`` or ``csv-columns``.
    """

    def __init__(self, message: str, *, code: str):
        super().__init__(f"{code}: {message}")
        self.code = code
