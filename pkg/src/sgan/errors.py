"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration values."""

    def __init__(self, message: str, *, key: str | None = None, line: int | None = None):
        self.message = message
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ContractError(ValueError):
    """An operation was called with arguments that break its preconditions."""


class UsageError(RuntimeError):
    """An object was used in a way its lifecycle does not allow."""


class TrainingError(RuntimeError):
    """Non-finite values or another failure during an update.

    Carries enough context to locate the failing network in a sweep.
    """

    def __init__(self, message: str, *, pair_index: int | None = None,
                 iteration: int | None = None, phase: str | None = None):
        self.pair_index = pair_index
        self.iteration = iteration
        self.phase = phase
        super().__init__(message)

    def context(self) -> dict:
        return {
            "message": str(self),
            "pair_index": self.pair_index,
            "iteration": self.iteration,
            "phase": self.phase,
        }


class IsolationError(TrainingError):
    """A local pair changed during the global phase of an iteration."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated, or of an unsupported version."""
