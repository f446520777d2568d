"""Exceptions raised across the raclora package.

Every error carries the process exit code the CLI reports for it.
"""
from typing import Optional


class RacLoraError(Exception):
    """Base class for all raclora errors."""

    exit_code = 1


class InvalidMatrix(RacLoraError):
    """A matrix is non-finite, has the wrong rank or is not symmetric."""


class ShapeError(RacLoraError):
    """Operands have incompatible shapes."""


class InvalidSpec(RacLoraError):
    """An objective or sketch specification violates its invariants."""

    exit_code = 2


class InvalidConfig(RacLoraError):
    """An experiment, chain or federated configuration is unusable."""

    exit_code = 2


class Unsupported(RacLoraError):
    """The requested quantity cannot be computed for this objective."""


class IoError(RacLoraError):
    """Reading or writing a dataset, trace or config file failed."""

    exit_code = 4


class DivergenceDetected(RacLoraError):
    """An iterate became non-finite or the loss exploded."""

    exit_code = 3

    def __init__(self, t: int, f_value: Optional[float], message: Optional[str] = None):
        self.t = t
        self.f_value = f_value
        # trace record of the step that diverged, attached by the chain steps
        self.record = None
        # last finite chain state, attached by the LoRA baseline loops
        self.state = None
        super().__init__(message or f"Divergence detected at step {t} (f={f_value})")
