class ConfigurationError(ValueError):
    """Invalid or infeasible configuration (CLI exit code 2)."""


class ParseError(ConfigurationError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class InfeasibleError(ConfigurationError):
    def __init__(self, constraint: str, message: str):
        self.constraint = constraint
        super().__init__(f"infeasible ({constraint}): {message}")


class DivergenceError(ArithmeticError):
    """Training left the finite region (CLI exit code 3)."""

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)
