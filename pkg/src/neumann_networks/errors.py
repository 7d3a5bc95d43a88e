class DimensionError(ValueError):
    """Array shapes are inconsistent with the forward model."""


class DivergenceError(ArithmeticError):
    """A recursion produced non-finite values (usually a step size too large).

    ``step`` is the index of the offending block or training step, when known.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SingularSubspaceError(ValueError):
    """A measured subspace ``X U`` is rank deficient."""
