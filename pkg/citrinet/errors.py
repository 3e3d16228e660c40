"""Exception types raised across the citrinet package."""

from typing import Optional


class CitrinetError(Exception):
    """Base class for every error raised by citrinet."""


class DimensionError(CitrinetError, ValueError):
    """Operand shapes do not agree."""

    def __init__(self, message: str, *shapes: tuple) -> None:
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ConfigurationError(CitrinetError, ValueError):
    """A layer, block or model was configured with inconsistent values."""


class ContractError(CitrinetError, RuntimeError):
    """An operation was called outside of its contract."""


class InputError(CitrinetError, ValueError):
    """Input data (audio, features, tokens, files) is unusable."""


class TrainingDivergedError(CitrinetError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, checkpoint_path: Optional[str] = None) -> None:
        self.step = step
        self.checkpoint_path = checkpoint_path
        where = f"; last good checkpoint: {checkpoint_path}" if checkpoint_path else ""
        super().__init__(f"non-finite loss at step {step}{where}")
