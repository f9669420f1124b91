"""Exception types shared across the package."""


class PsdeBnnError(Exception):
    pass


class ShapeError(PsdeBnnError, ValueError):
    pass


class DomainError(PsdeBnnError, ValueError):
    pass


class ContractError(PsdeBnnError, ValueError):
    pass


class ConfigError(PsdeBnnError, ValueError):
    pass


class FormatError(PsdeBnnError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericsError(PsdeBnnError, ArithmeticError):
    """Non-finite value produced during integration or loss evaluation."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (solver step {step})"
        super().__init__(message)
        self.step = step
