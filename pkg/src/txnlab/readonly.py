"""Safe-snapshot detection for read-only serializable transactions."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set


class Verdict(enum.Enum):
    PENDING = "pending"
    SAFE = "safe"
    UNSAFE = "unsafe"


@dataclass
class SafetyWatch:
    txn: int
    snapshot_seq: int
    pending_rw_set: Set[int]
    verdict: Verdict = Verdict.PENDING
    # member whose commit made the snapshot unsafe, for diagnostics
    spoiled_by: Optional[int] = None


class ReadOnlyOptimizer:
    """Tracks, per read-only transaction, the read/write transactions it waits on.

    A snapshot is unsafe once one of those transactions commits with an
    out-conflict to a transaction that committed at or before the snapshot;
    it is safe once all of them finished without doing so.
    """

    def __init__(self):
        self.watches: Dict[int, SafetyWatch] = {}
        self._members: Dict[int, Set[int]] = defaultdict(set)
        self.history: List[SafetyWatch] = []

    def watch(self, txn: int, snapshot_seq: int, concurrent_rw: Iterable[int]) -> SafetyWatch:
        w = SafetyWatch(txn, snapshot_seq, set(concurrent_rw))
        self.history.append(w)
        if not w.pending_rw_set:
            w.verdict = Verdict.SAFE
            return w
        self.watches[txn] = w
        for m in w.pending_rw_set:
            self._members[m].add(txn)
        return w

    def unwatch(self, txn: int) -> None:
        w = self.watches.pop(txn, None)
        if w is None:
            return
        for m in w.pending_rw_set:
            watchers = self._members.get(m)
            if watchers is not None:
                watchers.discard(txn)
                if not watchers:
                    del self._members[m]

    def on_rw_resolution(self, finished: int, earliest_out_commit: Optional[int] = None,
                         committed: bool = True) -> List[SafetyWatch]:
        """Called when a watched read/write transaction commits or aborts.

        Returns the watches that reached a final verdict.
        """
        decided = []
        for wid in sorted(self._members.pop(finished, ())):
            w = self.watches[wid]
            w.pending_rw_set.discard(finished)
            if (committed and earliest_out_commit is not None
                    and earliest_out_commit <= w.snapshot_seq):
                w.verdict = Verdict.UNSAFE
                w.spoiled_by = finished
            elif not w.pending_rw_set:
                w.verdict = Verdict.SAFE
            if w.verdict is not Verdict.PENDING:
                self.unwatch(wid)
                decided.append(w)
        return decided

    def clear(self) -> None:
        self.watches.clear()
        self._members.clear()
