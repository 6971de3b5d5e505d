"""Exception hierarchy shared by every module and mapped to CLI exit codes."""

from __future__ import annotations


class ClEnergyError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class InvalidArgumentError(ClEnergyError, ValueError):
    pass


class InvalidSampleError(ClEnergyError, ValueError):
    pass


class DegenerateEmbeddingError(ClEnergyError, ValueError):
    pass


class MissingLabelError(ClEnergyError, ValueError):
    pass


class SourceError(ClEnergyError):
    """A power source failed to produce a reading."""


class SourceExhausted(SourceError):
    """A finite source (trace replay) has no more rows."""


class PlatformUnavailableError(ClEnergyError):
    """A live hardware backend is not available here (CLI exit code 2)."""


class DivergenceError(ClEnergyError):
    def __init__(self, epoch: int, value: float) -> None:
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}")
        self.epoch = epoch
        self.value = value


class RecordParseError(ClEnergyError):
    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line
