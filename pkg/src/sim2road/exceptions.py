"""Exception hierarchy shared by all modules."""


class Sim2RoadError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(Sim2RoadError, ValueError):
    pass


class BehindCameraError(Sim2RoadError, ValueError):
    """A point has camera-frame depth at or below the projection epsilon."""

    def __init__(self, index, depth):
        self.index = int(index)
        self.depth = float(depth)
        super().__init__(f"point {self.index} is behind the camera (depth={self.depth:.6g} m)")


class DegenerateGeometryError(Sim2RoadError, ValueError):
    pass


class ParseError(Sim2RoadError, ValueError):
    def __init__(self, message, path=None, line_number=None):
        self.path = path
        self.line_number = line_number
        where = ""
        if path is not None:
            where += f"{path}"
        if line_number is not None:
            where += f":{line_number}"
        super().__init__(f"{where}: {message}" if where else message)


class CalibrationError(Sim2RoadError, ValueError):
    pass


class GenerationError(Sim2RoadError, RuntimeError):
    pass


class NumericalError(Sim2RoadError, ArithmeticError):
    pass


class ConfigError(Sim2RoadError, ValueError):
    pass
