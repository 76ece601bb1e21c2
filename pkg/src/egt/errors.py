"""Exception types shared across the package."""


class EGTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EGTError, ValueError):
    pass


class LabelError(EGTError, ValueError):
    pass


class ContractError(EGTError, RuntimeError):
    """An operation was called outside its preconditions."""


class ConfigError(EGTError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class FormatError(EGTError, ValueError):
    """A binary container could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(EGTError, RuntimeError):
    pass
