# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Exception hierarchy shared by every module.

Library code raises these; only the CLI entry point turns them into exit codes:

    UsageError   -> 1
    DataError    -> 2
    NumericError -> 3
"""

from __future__ import annotations


class UrlKitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class UsageError(UrlKitError, ValueError):
    """Invalid command-line usage or configuration value."""

    exit_code = 1


class DataError(UrlKitError):
    """Dataset, episode or checkpoint problem."""

    exit_code = 2


class DatasetFormatError(DataError):
    """Unreadable manifest or unsupported dataset format version."""


class MissingPayloadError(DataError):
    """A payload file named by a manifest does not exist."""


class SizeMismatchError(DataError):
    """Payload size disagrees with what the manifest declares."""


class DatasetValidationError(DataError):
    """Dataset content violates a structural invariant."""

    def __init__(self, message: str, split: str | None = None) -> None:
        super().__init__(message)
        self.split = split


class InfeasibleEpisodeError(DataError):
    """The requested episode regime cannot be drawn from a split."""


class CheckpointError(DataError):
    """Base class for checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or corrupt header."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint payload shorter than its manifest declares."""


class NumericError(UrlKitError, ArithmeticError):
    """NaN/Inf values and other numeric failures."""

    exit_code = 3


class DimensionError(NumericError, ValueError):
    """Operand shapes do not agree."""


class DomainError(NumericError):
    """Input outside an operation's mathematical domain (e.g. log of 0)."""


class DegenerateError(NumericError):
    """Zero denominators or degenerate kernel bandwidths."""


class TrainingError(NumericError):
    """Training diverged."""

    def __init__(self, message: str, iteration: int) -> None:
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
