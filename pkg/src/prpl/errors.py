"""Exception types raised across the package."""


class PRPLError(Exception):
    pass


class ConfigError(PRPLError, ValueError):
    pass


class DimensionError(PRPLError, ValueError):
    pass


class MissingClassError(PRPLError, ValueError):
    """A class has no members in a batch where a prototype is required."""


class DatasetError(PRPLError, ValueError):
    pass


class ParseError(PRPLError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SegmentationError(PRPLError, ValueError):
    pass


class ProtocolError(PRPLError, ValueError):
    pass


class NumericalError(PRPLError, FloatingPointError):
    pass
