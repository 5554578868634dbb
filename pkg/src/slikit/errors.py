"""Exception hierarchy.

Each CLI exit code maps onto one branch of this tree: config errors exit 1,
data errors exit 2, numerical failures exit 3.
"""


class SlikitError(Exception):
    exit_code = 1


class ConfigError(SlikitError, ValueError):
    exit_code = 1


class CalibrationError(ConfigError):
    """Rig parameters violate their invariants."""


class SceneParseError(ConfigError):
    """A scene or pipeline description could not be parsed."""


class DataError(SlikitError):
    exit_code = 2


class CalibrationMissingError(DataError, FileNotFoundError):
    pass


class DimensionMismatchError(DataError, ValueError):
    pass


class TrajectoryFormatError(DataError, ValueError):
    pass


class NumericalError(SlikitError, ArithmeticError):
    exit_code = 3


class OutOfFrustumError(NumericalError):
    """A point sits at or behind an image plane."""


class InsufficientPointsError(NumericalError):
    pass


class GraphError(NumericalError):
    """Disconnected pose graph or unusable information matrix."""
