"""Exception types shared across vardfs."""


class VardfsError(Exception):
    pass


class ShapeError(VardfsError, ValueError):
    """Operand shapes are incompatible."""


class RankError(ShapeError):
    pass


class DomainError(VardfsError, ValueError):
    """Input lies outside the domain of an elementwise function."""


class DegenerateError(VardfsError, ValueError):
    """A row, pool or instance has nothing valid to work with."""


class ExhaustedBudgetError(VardfsError, ValueError):
    pass


class InconsistentEvidenceError(VardfsError, ValueError):
    pass


class ConfigError(VardfsError, ValueError):
    pass


class FormatError(VardfsError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(VardfsError, FloatingPointError):
    """Training produced a non-finite loss."""
