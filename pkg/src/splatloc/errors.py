"""Exception types raised across the package."""


class SplatLocError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SplatLocError, ValueError):
    pass


class BehindCameraError(SplatLocError, ValueError):
    pass


class InvalidDepthError(SplatLocError, ValueError):
    pass


class DimensionMismatchError(InvalidInputError):
    pass


class InsufficientDataError(SplatLocError):
    pass


class SolverFailureError(SplatLocError):
    pass


class RansacFailureError(SolverFailureError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoOverlapError(SplatLocError):
    pass


class DivergenceError(SplatLocError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ParseError(SplatLocError, ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
