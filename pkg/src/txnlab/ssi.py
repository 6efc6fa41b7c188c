"""rw-antidependency tracking and dangerous-structure resolution.

Every serializable transaction gets a ``SerializableNode``. Edges point from
reader to writer: ``a -> b`` means ``a`` read a version that ``b``
superseded, so ``a`` must precede ``b`` in any serial order.

A structure ``t1 -> t2 -> t3`` only forces an abort once ``t3`` has committed
ahead of both other members, and, when ``t1`` is read-only, only if ``t3``
committed before ``t1`` took its snapshot. Until then it is left alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple, Union

from .errors import Unresolvable
from .mvcc import Status


class SerializableNode:
    __slots__ = ("id", "txn", "snapshot_seq", "commit_seq", "prepared",
                 "in_conflicts", "out_conflicts", "folded_out_seq",
                 "summary_in", "conservative_in", "conservative_out")

    def __init__(self, txn, snapshot_seq: int):
        self.id: int = txn.id
        self.txn = txn
        self.snapshot_seq = snapshot_seq
        self.commit_seq: Optional[int] = None
        self.prepared = False
        # dicts used as insertion-ordered sets: detection order is deterministic
        self.in_conflicts: Dict[int, None] = {}
        self.out_conflicts: Dict[int, None] = {}
        # earliest commit among out-conflict targets that left the graph
        self.folded_out_seq: Optional[int] = None
        self.summary_in = False
        self.conservative_in = False
        self.conservative_out = False

    @property
    def committed(self) -> bool:
        return self.commit_seq is not None

    @property
    def read_only(self) -> bool:
        """Declared read-only, or committed without writing anything."""
        return self.txn.read_only or (self.committed and not self.txn.wrote)

    def fold_out(self, seq: Optional[int]) -> None:
        if seq is not None and (self.folded_out_seq is None or seq < self.folded_out_seq):
            self.folded_out_seq = seq

    def __repr__(self):
        return f"<Node {self.id} cs={self.commit_seq} in={list(self.in_conflicts)} out={list(self.out_conflicts)}>"


@dataclass(frozen=True)
class Pseudo:
    """Stand-in for a partner that left the graph or whose identity is unknown.

    ``commit_seq`` of ``None`` means "not known to have committed".
    """

    commit_seq: Optional[int]
    label: str

    id = None
    prepared = False
    read_only = False

    @property
    def committed(self) -> bool:
        return self.commit_seq is not None


WILDCARD_IN = Pseudo(None, "summary-or-recovered-reader")

Member = Union[SerializableNode, Pseudo]


@dataclass(frozen=True)
class Victim:
    node: SerializableNode
    structure: Tuple[Optional[int], Optional[int], Optional[int]]
    prepared_partner: bool = False


class ConflictGraph:
    def __init__(self):
        self.nodes: Dict[int, SerializableNode] = {}
        self.flag_log: Optional[set] = None  # every (reader, writer) ever flagged

    def add(self, node: SerializableNode) -> None:
        self.nodes[node.id] = node

    def get(self, txid: int) -> Optional[SerializableNode]:
        return self.nodes.get(txid)

    # -- edges

    def flag(self, reader: SerializableNode, writer: SerializableNode) -> bool:
        """Record ``reader -> writer``; returns False if it already existed."""
        if writer.id in reader.out_conflicts:
            return False
        reader.out_conflicts[writer.id] = None
        writer.in_conflicts[reader.id] = None
        if self.flag_log is not None:
            self.flag_log.add((reader.id, writer.id))
        return True

    def remove_edge(self, reader: SerializableNode, writer: SerializableNode) -> None:
        reader.out_conflicts.pop(writer.id, None)
        writer.in_conflicts.pop(reader.id, None)

    def remove(self, node: SerializableNode) -> None:
        """Drop ``node`` and every edge touching it (abort or safe snapshot)."""
        for other in list(node.out_conflicts):
            self.nodes[other].in_conflicts.pop(node.id, None)
        for other in list(node.in_conflicts):
            self.nodes[other].out_conflicts.pop(node.id, None)
        node.out_conflicts.clear()
        node.in_conflicts.clear()
        self.nodes.pop(node.id, None)

    def earliest_out_commit(self, node: SerializableNode) -> Optional[int]:
        """Earliest commit among ``node``'s out-conflicts, folded ones included."""
        best = node.folded_out_seq
        if node.conservative_out:
            best = 0
        for other in node.out_conflicts:
            cs = self.nodes[other].commit_seq
            if cs is not None and (best is None or cs < best):
                best = cs
        return best

    def in_sources(self, node: SerializableNode) -> Iterator[Member]:
        for other in node.in_conflicts:
            yield self.nodes[other]
        if node.summary_in or node.conservative_in:
            yield WILDCARD_IN

    def out_targets(self, node: SerializableNode) -> Iterator[Member]:
        for other in node.out_conflicts:
            yield self.nodes[other]
        if node.folded_out_seq is not None:
            yield Pseudo(node.folded_out_seq, "folded")
        if node.conservative_out:
            yield Pseudo(0, "recovered-writer")

    # -- structure checks

    @staticmethod
    def _seq(member: Member, committing, pending: int) -> Optional[int]:
        if committing is not None and member is committing:
            return pending
        return member.commit_seq

    def actionable(self, t1: Member, t2: Member, t3: Member,
                   committing: Optional[SerializableNode] = None, pending: int = 0) -> bool:
        """Whether ``t1 -> t2 -> t3`` can be part of a cycle given commit order."""
        c3 = self._seq(t3, committing, pending)
        if c3 is None:
            return False
        c2 = self._seq(t2, committing, pending)
        if c2 is not None and c2 < c3:
            return False
        if t1 is not t3:
            c1 = self._seq(t1, committing, pending)
            if c1 is not None and c1 < c3:
                return False
            if isinstance(t1, SerializableNode) and t1.read_only and not c3 <= t1.snapshot_seq:
                return False
        return True

    @staticmethod
    def _abortable(member: Member) -> bool:
        if not isinstance(member, SerializableNode) or member.prepared or member.committed:
            return False
        return member.txn.status is Status.ACTIVE

    def select_victim(self, t1: Member, t2: Member, t3: Member,
                      caller: Optional[SerializableNode],
                      committing: Optional[SerializableNode] = None) -> Victim:
        """Pivot first, then the reader, then the calling transaction itself.

        When the committing transaction is the writer end of the structure and
        the pivot cannot be aborted, the committer fails rather than the reader.
        """
        structure = (t1.id, t2.id, t3.id)
        prepared = any(m.prepared for m in (t1, t2, t3))
        if committing is not None and t3 is committing and t1 is not t3:
            order = (t2, committing, t1)
        else:
            order = (t2, t1)
        for cand in order:
            if self._abortable(cand):
                return Victim(cand, structure, prepared)
        if caller is not None and caller in (t1, t2, t3) and self._abortable(caller):
            return Victim(caller, structure, prepared)
        raise Unresolvable(f"no abortable member in structure {structure}")

    def check_edge(self, reader: SerializableNode, writer: SerializableNode,
                   caller: SerializableNode) -> Optional[Victim]:
        """Structures containing the edge ``reader -> writer``."""
        for t3 in self.out_targets(writer):
            if self.actionable(reader, writer, t3):
                return self.select_victim(reader, writer, t3, caller)
        for t1 in self.in_sources(reader):
            if self.actionable(t1, reader, writer):
                return self.select_victim(t1, reader, writer, caller)
        return None

    def check_dangerous(self, pivot: SerializableNode,
                        caller: Optional[SerializableNode] = None) -> Optional[Victim]:
        """Structures with ``pivot`` in the middle."""
        for t1 in self.in_sources(pivot):
            for t3 in self.out_targets(pivot):
                if self.actionable(t1, pivot, t3):
                    return self.select_victim(t1, pivot, t3, caller)
        return None

    def precommit(self, node: SerializableNode, pending: int,
                  allow_self: bool = True) -> Optional[Victim]:
        """Structures involving ``node`` as if it committed now with seq ``pending``.

        With ``allow_self`` false (a prepared transaction committing) the
        node can never be the victim, and structures with nobody else to
        abort are left alone.
        """
        for t1, t2, t3 in self._structures(node):
            if self.actionable(t1, t2, t3, node, pending):
                try:
                    victim = self.select_victim(t1, t2, t3, node if allow_self else None,
                                                committing=node)
                except Unresolvable:
                    if allow_self:
                        raise
                    continue
                if victim.node is node and not allow_self:
                    continue
                return victim
        return None

    def _structures(self, node: SerializableNode):
        for t2_id in list(node.in_conflicts):
            t2 = self.nodes[t2_id]
            for t1 in self.in_sources(t2):
                yield t1, t2, node
        for t1 in self.in_sources(node):
            for t3 in self.out_targets(node):
                yield t1, node, t3
        for t2_id in list(node.out_conflicts):
            t2 = self.nodes[t2_id]
            for t3 in self.out_targets(t2):
                yield node, t2, t3

    # -- diagnostics

    def dump(self) -> List[dict]:
        rows = []
        for node in sorted(self.nodes.values(), key=lambda n: n.id):
            flags = []
            if node.read_only:
                flags.append("ro")
            if node.prepared:
                flags.append("prepared")
            if node.summary_in:
                flags.append("summary_in")
            if node.conservative_in:
                flags.append("conservative_in")
            if node.conservative_out:
                flags.append("conservative_out")
            rows.append({
                "id": node.id,
                "flags": flags,
                "commit_seq": node.commit_seq,
                "snapshot_seq": node.snapshot_seq,
                "earliest_out_commit": self.earliest_out_commit(node),
                "out": list(node.out_conflicts),
                "in": list(node.in_conflicts),
            })
        return rows
