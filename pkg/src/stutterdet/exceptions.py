"""Exception types raised across the package."""


class StutterDetError(Exception):
    """Base class for all package errors."""


class AudioDecodeError(StutterDetError):
    pass


class EmptyInputError(StutterDetError, ValueError):
    pass


class TooShortError(StutterDetError, ValueError):
    """Signal or feature sequence shorter than the operation requires."""


class DegenerateSignalError(StutterDetError, ValueError):
    """Zero-power interferer, all-zero impulse response and similar."""


class PoolError(StutterDetError):
    """Noise pool is missing, too small, or exhausted by unreadable files."""


class ManifestError(StutterDetError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfeasibleSplitError(StutterDetError, ValueError):
    pass


class MissingClassError(StutterDetError, ValueError):
    def __init__(self, label):
        self.label = label
        super().__init__(f"class {label!r} has no training samples")


class InvalidMaskError(StutterDetError, ValueError):
    pass


class DivergenceError(StutterDetError, RuntimeError):
    pass


class IncompatibleCheckpointError(StutterDetError):
    def __init__(self, message, keys=()):
        self.keys = list(keys)
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)
