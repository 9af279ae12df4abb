# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Universal representation kit - Core modules."""

from src.errors import DataError, NumericError, UrlKitError, UsageError
from src.nets import DomainNet, MultiDomainModel, load_checkpoint, save_checkpoint
from src.tensor import Tensor

__all__ = [
    "DataError",
    "DomainNet",
    "MultiDomainModel",
    "NumericError",
    "Tensor",
    "UrlKitError",
    "UsageError",
    "load_checkpoint",
    "save_checkpoint",
]
