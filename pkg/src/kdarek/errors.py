"""Exception types raised across the package."""


class KdarekError(Exception):
    """Base class for all package errors."""


class DuplicateKnots(KdarekError, ValueError):
    pass


class LengthMismatch(KdarekError, ValueError):
    pass


class EmptyKnots(KdarekError, ValueError):
    pass


class TooFewKnots(KdarekError, ValueError):
    pass


class TooFewSamples(KdarekError, ValueError):
    pass


class DimensionMismatch(KdarekError, ValueError):
    pass


class NonFiniteLoss(KdarekError, FloatingPointError):
    """Training produced a NaN/inf loss; ``epoch`` records where."""

    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class NotPD(KdarekError, ValueError):
    pass


class Infeasible(KdarekError, ValueError):
    pass


class MaxIterations(KdarekError, RuntimeError):
    pass


class ConfigError(KdarekError, ValueError):
    pass


class ModelFileError(KdarekError, ValueError):
    pass


class DegenerateColumn(UserWarning):
    """A feature knot column had near-duplicate entries and was jittered."""


class NoConvergence(UserWarning):
    """Power iteration hit its iteration cap before reaching tolerance."""
