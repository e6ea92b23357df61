"""Exception hierarchy shared across the package."""


class SegMaFormerError(Exception):
    pass


class DimensionError(SegMaFormerError, ValueError):
    """Incompatible tensor shapes."""


class DomainError(SegMaFormerError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ArgumentError(SegMaFormerError, ValueError):
    pass


class ConfigError(SegMaFormerError, ValueError):
    """Invalid model, training or data configuration.

    ``path`` names the offending field (e.g. ``model.stages[2].heads``) when known.
    """

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class NumericError(SegMaFormerError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class CheckpointError(SegMaFormerError):
    pass


class DataError(SegMaFormerError, ValueError):
    pass
