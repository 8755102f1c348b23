class CalibrationError(Exception):
    """Base class for every error raised by planecal."""


class InvalidArgumentError(CalibrationError, ValueError):
    """An argument violates an operation's precondition."""


class DegenerateGeometryError(CalibrationError, ValueError):
    """Points or directions are too degenerate for the requested geometry."""


class NumericalFailureError(CalibrationError, RuntimeError):
    """A linear system could not be solved even with regularization."""

    def __init__(self, message: str, iteration: int | None = None, block: str | None = None):
        context = []
        if block is not None:
            context.append(f"block={block}")
        if iteration is not None:
            context.append(f"iteration={iteration}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.iteration = iteration
        self.block = block


class SingularIndexError(CalibrationError, ZeroDivisionError):
    """The as-printed observability index is undefined for a zero singular value."""


class UnreachableTargetError(CalibrationError, RuntimeError):
    """Position IK did not converge to the requested target."""


class RegionInfeasibleError(CalibrationError, RuntimeError):
    """Too many targets in a sampling region were unreachable."""


class SampleParseError(CalibrationError, ValueError):
    """A sample file row could not be parsed."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class SampleFormatError(CalibrationError, ValueError):
    """A sample file does not carry the expected header."""
