"""Exception hierarchy.

``ContractError`` subclasses signal a violated precondition (CLI exit code 2);
``FormatError`` subclasses signal unreadable or corrupt files (CLI exit code 3).
"""


class FlattenKitError(Exception):
    """Base class for every error raised by this package."""


class ContractError(FlattenKitError, ValueError):
    """An input violates an operation's precondition."""


class ShapeMismatch(ContractError):
    pass


class NotPerfectSquare(ContractError):
    def __init__(self, t: int):
        super().__init__(
            f"{t} frames do not form a square grid; pass an explicit rows x cols grid"
        )
        self.t = t


class InvalidPermutation(ContractError):
    pass


class InvalidViewSpec(ContractError):
    pass


class SpriteOutOfBounds(ContractError):
    pass


class Unconfigured(ContractError):
    pass


class NonFiniteError(FlattenKitError, ArithmeticError):
    """A loss, activation or parameter became NaN or infinite."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class FormatError(FlattenKitError, OSError):
    pass


class BadMagic(FormatError):
    pass


class Truncated(FormatError):
    pass


class ManifestError(FormatError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingFrame(FormatError):
    def __init__(self, index: int):
        super().__init__(f"frame {index} is missing from the sequence")
        self.index = index
