"""Exception hierarchy for the transaction engine."""


class TxnError(Exception):
    """Base class for every error the engine raises."""

    code = "ERROR"


class InvalidOptions(TxnError):
    code = "INVALID_OPTIONS"


class TxnNotActive(TxnError):
    code = "NOT_ACTIVE"


class ReadOnlyViolation(TxnError):
    code = "READ_ONLY_VIOLATION"


class CannotAbortPrepared(TxnError):
    code = "CANNOT_ABORT_PREPARED"


class AbortError(TxnError):
    """An error that aborted the transaction it was raised in."""


class WwConflict(AbortError):
    code = "WW_CONFLICT"

    def __init__(self, msg="could not serialize due to concurrent update"):
        super().__init__(msg)


class SerializationFailure(AbortError):
    """Raised when a dangerous structure forces this transaction out.

    ``structure`` holds the (reader, pivot, writer) transaction ids of the
    structure that was resolved; ids may be ``None`` for summarized or
    recovered partners whose identity is unknown.
    """

    code = "SERIALIZATION_FAILURE"

    def __init__(self, msg="could not serialize access due to read/write dependencies",
                 structure=None, prepared_partner=False):
        super().__init__(msg)
        self.structure = structure
        self.prepared_partner = prepared_partner


class DeadlockDetected(AbortError):
    code = "DEADLOCK"


class DeferrableTimeout(AbortError):
    code = "DEFERRABLE_TIMEOUT"


class LockTableFull(TxnError):
    code = "LOCK_TABLE_FULL"


class DuplicateGid(TxnError):
    code = "DUPLICATE_GID"


class UnknownGid(TxnError):
    code = "UNKNOWN_GID"


class CorruptRecord(TxnError):
    code = "CORRUPT_RECORD"


class Unresolvable(AssertionError):
    """A dangerous structure whose members are all committed or prepared."""


class WouldBlock(Exception):
    """Internal signal: the operation must wait for ``holders`` to finish.

    Under the deterministic executor this propagates to the caller so the
    session can be suspended; in threaded mode the engine waits and retries.
    """

    def __init__(self, holders=(), reason="lock"):
        super().__init__(reason)
        self.holders = frozenset(holders)
        self.reason = reason
