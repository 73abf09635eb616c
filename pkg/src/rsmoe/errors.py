from __future__ import annotations

from typing import Any, Optional


class RsMoeError(Exception):
    """Base class for every error raised by rsmoe."""


class DimensionError(RsMoeError, ValueError):
    pass


class ConfigError(RsMoeError, ValueError):
    pass


class DataError(RsMoeError, ValueError):
    pass


class VocabularyError(DataError):
    pass


class InputError(RsMoeError, ValueError):
    pass


class NumericError(RsMoeError, ArithmeticError):
    pass


class LoraError(ConfigError):
    pass


class CheckpointError(RsMoeError):
    pass


class IntegrityError(CheckpointError):
    pass


class ChecksumError(IntegrityError):
    """
    Raised after a checkpoint parsed cleanly but its stored checksum disagrees.
    The parsed checkpoint is kept on `.checkpoint` for inspection.
    """

    def __init__(self, message: str, checkpoint: Optional[Any] = None):
        super().__init__(message)
        self.checkpoint = checkpoint
