"""Exception classes shared across the package."""


class EmmaError(Exception):
    """Base class for package errors."""


class DimensionError(EmmaError, ValueError):
    pass


class ContractError(EmmaError, RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigError(EmmaError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InputError(EmmaError, ValueError):
    pass


class FormatError(EmmaError, ValueError):
    """Malformed on-disk artifact; ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset=None):
        self.offset = offset
        self.reason = message
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)


class DigestError(FormatError):
    pass


class EstimationError(EmmaError, ValueError):
    pass


class TrainingError(EmmaError, RuntimeError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} at step {step}")
