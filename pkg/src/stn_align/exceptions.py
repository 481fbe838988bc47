"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A kernel produced, or was handed, NaN/Inf values."""


class DegenerateTransformError(ValueError):
    """A transform is singular or its projective divisor collapsed.

    ``pixel`` identifies the offending output pixel (flat index) when the
    failure came from grid generation, else None.
    """

    def __init__(self, message, pixel=None):
        super().__init__(message)
        self.pixel = pixel


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite at ``iteration``."""

    def __init__(self, message, iteration, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
