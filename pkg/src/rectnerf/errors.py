"""Exception hierarchy shared by all modules."""


class RectNeRFError(Exception):
    """Base class for errors raised by this package."""


class DomainError(RectNeRFError, ValueError):
    """An argument is outside the domain of an operation."""


class InvalidCameraError(DomainError):
    pass


class BehindCameraError(DomainError):
    pass


class SceneLoadError(RectNeRFError):
    """A scene directory is missing files or holds unreadable data."""


class CalibrationError(SceneLoadError):
    pass


class SplitError(RectNeRFError):
    pass


class ConfigError(RectNeRFError, ValueError):
    pass


class CheckpointError(RectNeRFError):
    pass


class NumericalError(RectNeRFError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
