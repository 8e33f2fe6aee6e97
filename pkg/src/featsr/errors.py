"""Exception types shared across the package.

Argument problems raise plain :class:`ValueError`; the classes below cover the
failure modes callers are expected to catch and map to exit codes.
"""


class FormatError(ValueError):
    """A tensor or checkpoint file is corrupt, truncated or of the wrong kind."""


class DegenerateFeatureError(ValueError):
    """A feature vector collapsed to (numerically) zero norm."""


class InvalidStateError(RuntimeError):
    """An operation was called before its prerequisite (e.g. backward before forward)."""


class DivergenceError(RuntimeError):
    """A non-finite value appeared during training or sampling.

    Attributes:
        step: index of the offending training or solver step.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DivergedSampleError(DivergenceError):
    pass


class TrainingDivergenceError(DivergenceError):
    pass


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""
