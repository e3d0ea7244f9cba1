"""Exception types raised across the package."""


class ShrinkMatchError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ShrinkMatchError, ValueError):
    """Non-finite values, bad normalisation, out-of-range scalars."""


class ShapeError(ShrinkMatchError, ValueError):
    pass


class ContractViolation(ShrinkMatchError, RuntimeError):
    """An operation was called outside its precondition."""


class ConfigError(ShrinkMatchError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}" if field else message)


class DataFormatError(ShrinkMatchError, IOError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)


class CheckpointError(ShrinkMatchError, IOError):
    pass


class NonFiniteLossError(ShrinkMatchError, FloatingPointError):
    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message + (f" (batch dumped to {dump_path})" if dump_path else ""))
