"""Exception types shared across the package."""


class PcnormalsError(ValueError):
    """Base class for all errors raised by this package."""


class ParseError(PcnormalsError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class EmptyInputError(PcnormalsError):
    """An operation received no data to work on."""


class SizeError(PcnormalsError):
    """A count argument is out of range or two sequences disagree in length."""


class ShapeError(PcnormalsError):
    """Tensor shapes are incompatible for the requested operation."""


class DegenerateInputError(PcnormalsError):
    """Geometrically degenerate input (zero vector, rank-deficient patch, ...)."""


class ParameterError(PcnormalsError):
    """A numeric parameter is outside its admissible range."""


class MissingDataError(PcnormalsError):
    """Required optional data (normals, paired clean cloud) is absent."""
