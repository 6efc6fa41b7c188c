"""Multiversion key-value engine with snapshot isolation and serializable snapshot isolation."""

from .engine import Engine, EngineConfig
from .errors import (AbortError, CannotAbortPrepared, CorruptRecord, DeadlockDetected,
                     DeferrableTimeout, DuplicateGid, InvalidOptions, LockTableFull,
                     ReadOnlyViolation, SerializationFailure, TxnError, TxnNotActive,
                     UnknownGid, WwConflict)
from .mvcc import Mode, Status

__all__ = [
    "Engine", "EngineConfig", "Mode", "Status",
    "TxnError", "AbortError", "SerializationFailure", "WwConflict", "DeadlockDetected",
    "DeferrableTimeout", "InvalidOptions", "TxnNotActive", "ReadOnlyViolation",
    "CannotAbortPrepared", "LockTableFull", "DuplicateGid", "UnknownGid", "CorruptRecord",
]
