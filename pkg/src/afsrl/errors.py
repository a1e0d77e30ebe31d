"""Exception types shared across the package."""


class AfsrlError(Exception):
    pass


class DimensionError(AfsrlError, ValueError):
    pass


class DegenerateEmbeddingError(AfsrlError, ArithmeticError):
    """A row collapsed to (near) zero norm."""


class EmptyGraphError(AfsrlError, ValueError):
    pass


class ParseError(AfsrlError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TooFewPointsError(AfsrlError, ValueError):
    pass


class NumericalError(AfsrlError, ArithmeticError):
    """Non-finite loss or parameters during training."""


class CheckpointError(AfsrlError, ValueError):
    pass


class CorpusError(AfsrlError, ValueError):
    """A corpus directory that is missing, empty, or laid out wrongly."""
