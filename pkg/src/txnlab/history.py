"""Event log consumed by the serialization-graph oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple


@dataclass(frozen=True)
class HistoryEvent:
    """One engine-visible step.

    ``kind`` is one of begin, read, scan, write, delete, commit, abort,
    prepare. Reads and scans carry the ``snap_seq`` they ran against plus
    what the engine returned (``value``/``result``) and which transaction
    wrote it (``source``/result triples), so the oracle can re-derive the
    observed versions on its own and cross-check them.
    """

    seq: int
    txn: int
    kind: str
    table: Optional[str] = None
    key: Optional[bytes] = None
    value: Optional[bytes] = None
    source: Optional[int] = None
    lo: Optional[bytes] = None
    hi: Optional[bytes] = None
    result: Optional[Tuple[Tuple[bytes, bytes, int], ...]] = None
    snap_seq: Optional[int] = None
    commit_seq: Optional[int] = None
    mode: Optional[str] = None
    read_only: bool = False
    reason: Optional[str] = None
    structure: Optional[tuple] = None
    gid: Optional[str] = None
