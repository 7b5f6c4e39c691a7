"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of operands do not fit together."""


class ParameterError(ValueError):
    """An argument is outside its admissible range."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf."""


class ContractError(RuntimeError):
    """An API was called in a state it does not support."""


class DataError(ValueError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class CheckpointMismatch(DataError):
    """A checkpoint does not match the model it is loaded into."""
