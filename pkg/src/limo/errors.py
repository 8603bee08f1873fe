"""Exception hierarchy shared by every limo module."""


class LimoError(Exception):
    """Base class for all errors raised by limo."""


class DimensionError(LimoError, ValueError):
    pass


class DomainError(LimoError, ValueError):
    pass


class NumericError(LimoError, ArithmeticError):
    pass


class DegenerateEmbeddingError(LimoError, ValueError):
    pass


class ContractError(LimoError, ValueError):
    pass


class ConfigurationError(LimoError, ValueError):
    pass


class LabelError(LimoError, ValueError):
    pass


class EpisodeError(LimoError, ValueError):
    pass


class FormatError(LimoError, ValueError):
    """Malformed embedding container; ``offset`` is the byte position at fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(LimoError, FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, report):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report
