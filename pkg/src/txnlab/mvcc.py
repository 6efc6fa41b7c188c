"""Versioned storage primitives: snapshots, tuple versions, tables."""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .errors import InvalidOptions


class Mode(enum.Enum):
    SI = "si"
    SERIALIZABLE = "ssi"
    S2PL = "s2pl"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        text = text.lower()
        aliases = {"serializable": "ssi", "repeatable-read": "si", "2pl": "s2pl"}
        try:
            return cls(aliases.get(text, text))
        except ValueError:
            raise InvalidOptions(f"unknown mode {text!r}; use si, ssi or s2pl") from None


class Status(enum.Enum):
    ACTIVE = "active"
    PREPARING = "preparing"
    PREPARED = "prepared"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class Snapshot:
    """Visibility frontier.

    ``xmin`` is the oldest transaction id active when the snapshot was taken,
    ``xmax`` the first unassigned id, ``active`` the in-progress ids in
    ``[xmin, xmax)``. ``seq`` is the last commit sequence number assigned
    before the snapshot; a transaction committed before the snapshot iff its
    commit sequence number is ``<= seq``.
    """

    xmin: int
    xmax: int
    active: frozenset
    seq: int


class TupleVersion:
    __slots__ = ("vid", "key", "value", "xmin", "xmax", "committed_xmin", "committed_xmax")

    def __init__(self, vid: int, key: bytes, value: bytes, xmin: int):
        self.vid = vid
        self.key = key
        self.value = value
        self.xmin = xmin
        self.xmax: Optional[int] = None
        self.committed_xmin: Optional[int] = None
        self.committed_xmax: Optional[int] = None

    def __repr__(self):
        return f"TupleVersion({self.key!r}={self.value!r}, xmin={self.xmin}, xmax={self.xmax})"


@dataclass
class TxnRecord:
    """Commit-log entry kept for every transaction id ever assigned."""

    status: Status
    mode: Mode
    commit_seq: Optional[int] = None


def committed_in(snapshot: Snapshot, xid: int, clog: Dict[int, TxnRecord]) -> bool:
    """True if ``xid`` committed before ``snapshot`` was taken."""
    if xid >= snapshot.xmax or xid in snapshot.active:
        return False
    rec = clog.get(xid)
    return rec is not None and rec.status is Status.COMMITTED


def visible(snapshot: Snapshot, version: TupleVersion, self_id: int,
            clog: Dict[int, TxnRecord]) -> bool:
    if version.xmin != self_id and not committed_in(snapshot, version.xmin, clog):
        return False
    xmax = version.xmax
    if xmax is None:
        return True
    if xmax == self_id:
        return False
    return not committed_in(snapshot, xmax, clog)


class Table:
    """Ordered map of key -> version chain (oldest first) plus row write locks."""

    def __init__(self, name: str):
        self.name = name
        self.rows: Dict[bytes, List[TupleVersion]] = {}
        self._keys: List[bytes] = []
        self.write_locks: Dict[bytes, int] = {}

    def chain(self, key: bytes) -> List[TupleVersion]:
        return self.rows.get(key, [])

    def append(self, version: TupleVersion) -> None:
        chain = self.rows.get(version.key)
        if chain is None:
            chain = self.rows[version.key] = []
            bisect.insort(self._keys, version.key)
        chain.append(version)

    def remove_key(self, key: bytes) -> None:
        if self.rows.pop(key, None) is not None:
            i = bisect.bisect_left(self._keys, key)
            del self._keys[i]

    def keys_in(self, lo: bytes, hi: bytes) -> List[bytes]:
        i = bisect.bisect_left(self._keys, lo)
        j = bisect.bisect_left(self._keys, hi)
        return self._keys[i:j]

    def __len__(self):
        return len(self.rows)


@dataclass(eq=False)
class TxnHandle:
    id: int
    mode: Mode
    read_only: bool
    deferrable: bool
    snapshot: Snapshot
    status: Status = Status.ACTIVE
    write_set: Set[Tuple[str, bytes]] = field(default_factory=set)
    # versions created / deleted by this transaction, for commit & abort
    created: List[Tuple[Table, TupleVersion]] = field(default_factory=list)
    deleted: List[TupleVersion] = field(default_factory=list)
    commit_seq: Optional[int] = None
    gid: Optional[str] = None
    pending_error: Optional[Exception] = None
    abort_reason: Optional[str] = None
    safe: bool = False
    waiting_safe: bool = False
    snapshot_attempts: int = 1
    watch: Optional[object] = None
    # (table, key) row write locks held, released at commit/abort
    row_locks: List[Tuple[Table, bytes]] = field(default_factory=list)

    @property
    def wrote(self) -> bool:
        return bool(self.write_set)

    def __hash__(self):
        return self.id

    def __repr__(self):
        return f"<Txn {self.id} {self.mode.value} {self.status.value}>"
