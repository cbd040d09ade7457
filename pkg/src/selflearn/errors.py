"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: configuration problems exit 2,
anything else raised from a running stage exits 1.
"""

from __future__ import annotations


class SelfLearnError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(SelfLearnError):
    """Invalid or unusable run configuration."""


class StructureError(SelfLearnError):
    """A structural invariant was violated (duplicate ids, misaligned lists)."""


class TransportError(SelfLearnError):
    """A backend call failed at the transport level after retries."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class MalformedResponseError(SelfLearnError):
    """A backend answered, but the payload did not match its contract."""


class CapabilityError(SelfLearnError):
    """The configured backend does not support a required capability."""


class SampleBatchError(SelfLearnError):
    """Some samples in a batch could not be generated."""

    def __init__(self, failed_indices: list[int]):
        super().__init__(f"sample generation failed at indices {failed_indices}")
        self.failed_indices = failed_indices


class TrainerError(SelfLearnError):
    """The external trainer reported failure."""

    def __init__(self, message: str, trainer_output: str = ""):
        super().__init__(message)
        self.trainer_output = trainer_output


class JsonlError(SelfLearnError):
    """A JSONL file contained a line that could not be parsed."""

    def __init__(self, path: str, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no
