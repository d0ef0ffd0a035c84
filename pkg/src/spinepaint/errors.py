"""Exception hierarchy shared across the package.

Exit codes (used by the CLI): 0 ok, 2 config error, 3 data error,
4 compatibility error, 5 numerical/training failure.
"""


class SpinepaintError(Exception):
    exit_code = 1


class ConfigError(SpinepaintError):
    exit_code = 2


class InvalidParameterError(ConfigError):
    pass


class DataError(SpinepaintError):
    exit_code = 3


class InvalidLandmarkError(DataError):
    """Landmark lies outside the grid's physical extent."""


class RegionError(DataError):
    """No candidate voxels in the requested insertion region."""


class StateError(DataError):
    """Operation applied to an object in the wrong state."""


class CompatibilityError(SpinepaintError):
    exit_code = 4


class ShapeError(CompatibilityError):
    """Array shapes or grids do not match."""


class ExtentMismatchError(CompatibilityError):
    """Grids do not cover the same physical extent."""


class NumericalError(SpinepaintError):
    exit_code = 5


class TrainingFailureError(NumericalError):
    """Loss diverged; the last good checkpoint is retained."""


class CalibrationError(NumericalError):
    """Evaluation classifier below the required accuracy; metrics would be unreliable."""


class ScheduleError(NumericalError):
    """Internal schedule inconsistency (effective timesteps not monotone)."""
