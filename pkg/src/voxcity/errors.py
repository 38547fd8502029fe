"""Exception types shared across the package."""


class VoxCityError(Exception):
    """Base class for all package errors."""


class EmptyInputError(VoxCityError):
    """Raised when an operation receives an empty point cloud or grid."""


class OutOfOccupancyError(VoxCityError):
    """A point fell outside the occupied region of a grid.

    Carries the index of the first offending point.
    """

    def __init__(self, index, message=None):
        self.index = int(index)
        super().__init__(message or f"point {self.index} lies outside grid occupancy")


class ChannelMismatchError(VoxCityError):
    """Attribute channel layouts are incompatible."""


class BoundingBoxError(VoxCityError):
    """A dense bounding box does not cover the occupied voxels."""


class ConfigError(VoxCityError):
    """Invalid run configuration (CLI exit code 2)."""


class DegenerateOutputError(VoxCityError):
    """A generation stage produced an empty grid (CLI exit code 3)."""

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"degenerate empty output at stage '{stage}'")
