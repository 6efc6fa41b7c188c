"""Bounded SSI state: aggressive cleanup and summarization of committed transactions."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional

from .locks import DUMMY, SireadLockManager
from .ssi import ConflictGraph, SerializableNode


class CommittedRing:
    """Committed serializable nodes still tracked, oldest commit first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: "OrderedDict[int, SerializableNode]" = OrderedDict()

    def __len__(self):
        return len(self.entries)

    def add(self, node: SerializableNode) -> None:
        self.entries[node.id] = node

    def oldest(self) -> Optional[SerializableNode]:
        return next(iter(self.entries.values()), None)

    def discard(self, txid: int) -> None:
        self.entries.pop(txid, None)


class SummaryTable:
    """Summarized transaction id -> earliest out-conflict commit (None: no conflict out).

    Bounded; evicting an entry makes later lookups of that id pessimistic.
    """

    def __init__(self, capacity: int = 65536):
        self.capacity = capacity
        self.entries: "OrderedDict[int, Optional[int]]" = OrderedDict()
        self.evicted = 0
        self._evicted_ids: set = set()

    def __len__(self):
        return len(self.entries)

    def put(self, txid: int, earliest_out: Optional[int]) -> None:
        self.entries[txid] = earliest_out
        while len(self.entries) > self.capacity:
            old, _ = self.entries.popitem(last=False)
            self._evicted_ids.add(old)
            self.evicted += 1

    def get(self, txid: int):
        """Returns (found, earliest_out); evicted ids report earliest_out=0."""
        if txid in self.entries:
            return True, self.entries[txid]
        if txid in self._evicted_ids:
            return True, 0
        return False, None


@dataclass(frozen=True)
class Lookup:
    kind: str  # "not_serializable" | "tracked" | "summarized"
    node: Optional[SerializableNode] = None
    earliest_out_commit: Optional[int] = None


NOT_SERIALIZABLE = Lookup("not_serializable")


class MemoryGovernor:
    def __init__(self, graph: ConflictGraph, locks: SireadLockManager,
                 capacity: int = 256, summary_capacity: int = 65536):
        self.graph = graph
        self.locks = locks
        self.ring = CommittedRing(capacity)
        self.summary = SummaryTable(summary_capacity)
        self.summarized_total = 0
        self.cleanup_runs = 0
        self.cleaned_total = 0

    def admit(self, node: SerializableNode) -> None:
        self.ring.add(node)

    def enforce_capacity(self) -> None:
        while len(self.ring) > self.ring.capacity:
            self.summarize_oldest()

    def on_commit_cleanup(self, horizon: Optional[int]) -> int:
        """Release committed nodes that no active transaction is concurrent with.

        ``horizon`` is the smallest snapshot sequence among active serializable
        transactions (None when there are none). A committed node with
        ``commit_seq <= horizon`` committed before every active snapshot.
        """
        self.cleanup_runs += 1
        cleaned = 0
        while True:
            node = self.ring.oldest()
            if node is None or (horizon is not None and node.commit_seq > horizon):
                break
            self._release(node)
            cleaned += 1
        self.locks.gc_dummy(horizon)
        self.cleaned_total += cleaned
        return cleaned

    def _release(self, node: SerializableNode) -> None:
        for reader_id in list(node.in_conflicts):
            self.graph.nodes[reader_id].fold_out(node.commit_seq)
        self.locks.release_holder(node.id)
        self.graph.remove(node)
        self.ring.discard(node.id)

    def readonly_only_cleanup(self) -> None:
        """With no read/write transaction active, committed read locks are dead weight."""
        for node in list(self.ring.entries.values()):
            self.locks.release_holder(node.id)
            for reader_id in list(node.in_conflicts):
                reader = self.graph.nodes[reader_id]
                if reader.committed:
                    reader.fold_out(node.commit_seq)
                    self.graph.remove_edge(reader, node)
        self.locks.gc_dummy(None)

    def summarize_oldest(self) -> bool:
        node = self.ring.oldest()
        if node is None:
            return False
        self.summary.put(node.id, self.graph.earliest_out_commit(node))
        self.locks.transfer_to_dummy(node.id, node.commit_seq)
        for reader_id in list(node.in_conflicts):
            self.graph.nodes[reader_id].fold_out(node.commit_seq)
        for writer_id in list(node.out_conflicts):
            writer = self.graph.nodes[writer_id]
            if not writer.committed:
                writer.summary_in = True
        self.graph.remove(node)
        self.ring.discard(node.id)
        self.summarized_total += 1
        return True

    def summary_lookup(self, txid: int, serializable: bool) -> Lookup:
        if not serializable:
            return NOT_SERIALIZABLE
        node = self.graph.get(txid)
        if node is not None:
            return Lookup("tracked", node)
        found, earliest = self.summary.get(txid)
        if found:
            return Lookup("summarized", earliest_out_commit=earliest)
        return NOT_SERIALIZABLE

    def clear(self) -> None:
        self.ring.entries.clear()
