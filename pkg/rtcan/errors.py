"""Exception hierarchy. Soft problems are IssueRecords, not exceptions."""

from __future__ import annotations


class RTCANError(Exception):
    """Base for every error raised by rtcan."""


# --- gasdb-data ---

class ManifestLoadError(RTCANError):
    """A manifest entry does not resolve to files on disk."""

    def __init__(self, message: str, pair_id: str | None = None) -> None:
        super().__init__(message)
        self.pair_id = pair_id


class ManifestParseError(RTCANError, ValueError):
    """Manifest JSON or one of its records is malformed."""

    def __init__(self, message: str, record_index: int | None = None) -> None:
        super().__init__(message)
        self.record_index = record_index


class PairLookupError(RTCANError, KeyError):
    def __str__(self) -> str:
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class AlignmentError(RTCANError, ValueError):
    """rgb / thermal / mask dimensions disagree."""


class MaskValueError(RTCANError, ValueError):
    """Mask holds values outside {0, 255} on disk (or {0, 1} in memory)."""


class SplitError(RTCANError, ValueError):
    pass


# --- synth-plume ---

class SynthParameterError(RTCANError, ValueError):
    pass


# --- rtcan-model ---

class ModelConfigError(RTCANError, ValueError):
    pass


class ShapeError(RTCANError, ValueError):
    pass


# --- losses ---

class LossValidationError(RTCANError, ValueError):
    pass


# --- train-eval ---

class NonFiniteLossError(RTCANError):
    """Training produced a NaN/inf loss; carries the ids of the offending batch."""

    def __init__(self, message: str, batch_ids: list[str], step: int, epoch: int) -> None:
        super().__init__(message)
        self.batch_ids = list(batch_ids)
        self.step = step
        self.epoch = epoch


class CheckpointError(RTCANError):
    pass


class ConfigHashMismatchError(CheckpointError):
    """Checkpoint was written for a different architecture than the one requested."""


# --- cli ---

class OutputExistsError(RTCANError):
    """An output artifact already exists and --force was not given."""
