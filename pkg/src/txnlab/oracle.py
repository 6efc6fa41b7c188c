"""Serialization-graph oracle.

Rebuilds the multiversion serialization graph from the event log alone:
the installed version order of every key is the commit order of its
writers, and the version each read observed is recomputed from the read's
snapshot. The engine's reported values only serve as a cross-check.
"""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx

from .history import HistoryEvent

INITIAL = 0  # writer id of the implicit initial (absent) version


class OracleError(AssertionError):
    pass


class IncompleteLog(OracleError):
    pass


@dataclass
class _Read:
    table: str
    key: Optional[bytes]
    snap: int
    own: Dict[bytes, Optional[bytes]]  # own writes visible at the time (key -> value)
    lo: Optional[bytes] = None
    hi: Optional[bytes] = None
    value: Optional[bytes] = None
    source: Optional[int] = None
    result: Optional[tuple] = None


@dataclass
class _Txn:
    id: int
    mode: str
    read_only: bool
    begin: int
    snap: int
    commit_seq: Optional[int] = None
    status: str = "active"
    abort_event: Optional[HistoryEvent] = None
    reads: List[_Read] = field(default_factory=list)
    writes: Dict[Tuple[str, bytes], Optional[bytes]] = field(default_factory=dict)


@dataclass
class DependencyGraph:
    nodes: Set[int]
    edges: Set[Tuple[int, int, str]]

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(sorted(self.nodes))
        for a, b, kind in sorted(self.edges):
            if g.has_edge(a, b):
                g[a][b]["kinds"].add(kind)
            else:
                g.add_edge(a, b, kinds={kind})
        return g

    def of_kind(self, kind: str) -> Set[Tuple[int, int]]:
        return {(a, b) for a, b, k in self.edges if k == kind}


class History:
    """Parsed event log with the installed version order of every key."""

    def __init__(self, events: Sequence[HistoryEvent]):
        self.events = list(events)
        self.txns: Dict[int, _Txn] = {}
        for ev in self.events:
            self._apply(ev)
        self.committed = sorted((t for t in self.txns.values() if t.status == "committed"),
                                key=lambda t: t.commit_seq)
        # (table, key) -> [(commit_seq, writer, value)] in commit order
        self.installed: Dict[Tuple[str, bytes], List[Tuple[int, int, Optional[bytes]]]] = defaultdict(list)
        for t in self.committed:
            for tk, value in t.writes.items():
                self.installed[tk].append((t.commit_seq, t.id, value))
        self._seqs = {tk: [e[0] for e in entries] for tk, entries in self.installed.items()}
        self.keys_by_table: Dict[str, List[bytes]] = defaultdict(list)
        for table, key in sorted(self.installed):
            self.keys_by_table[table].append(key)
        self.point_readers: Dict[Tuple[str, bytes], List[Tuple[_Txn, _Read]]] = defaultdict(list)
        self.scanners: Dict[str, List[Tuple[_Txn, _Read]]] = defaultdict(list)
        for t in self.committed:
            for r in t.reads:
                if r.key is not None:
                    self.point_readers[(r.table, r.key)].append((t, r))
                else:
                    self.scanners[r.table].append((t, r))
        # last commit sequence number logged before each event
        self.commits_before: List[int] = []
        last = 0
        for ev in self.events:
            self.commits_before.append(last)
            if ev.kind == "commit":
                last = ev.commit_seq

    def _apply(self, ev: HistoryEvent) -> None:
        if ev.kind == "begin":
            self.txns[ev.txn] = _Txn(ev.txn, ev.mode, ev.read_only, ev.seq, ev.snap_seq)
            return
        t = self.txns.get(ev.txn)
        if t is None:
            raise IncompleteLog(f"event {ev.seq} for transaction {ev.txn} without begin")
        if ev.kind == "read":
            own = {ev.key: t.writes[(ev.table, ev.key)]} if (ev.table, ev.key) in t.writes else {}
            t.reads.append(_Read(ev.table, ev.key, ev.snap_seq, own, value=ev.value, source=ev.source))
        elif ev.kind == "scan":
            own = {k: v for (tb, k), v in t.writes.items() if tb == ev.table and ev.lo <= k < ev.hi}
            t.reads.append(_Read(ev.table, None, ev.snap_seq, own, lo=ev.lo, hi=ev.hi, result=ev.result))
        elif ev.kind == "write":
            t.writes[(ev.table, ev.key)] = ev.value
        elif ev.kind == "delete":
            t.writes[(ev.table, ev.key)] = None
        elif ev.kind == "commit":
            t.status, t.commit_seq = "committed", ev.commit_seq
        elif ev.kind == "abort":
            t.status, t.abort_event = "aborted", ev
        elif ev.kind == "prepare":
            t.status = "prepared"
        else:
            raise IncompleteLog(f"unknown event kind {ev.kind!r}")

    def observed(self, table: str, key: bytes, snap: int) -> int:
        """Index of the installed version visible at ``snap`` (-1: initial)."""
        seqs = self._seqs.get((table, key))
        if not seqs:
            return -1
        return bisect.bisect_right(seqs, snap) - 1

    def entry(self, table: str, key: bytes, i: int) -> Tuple[int, int, Optional[bytes]]:
        if i < 0:
            return (0, INITIAL, None)
        return self.installed[(table, key)][i]

    def keys_in(self, table: str, lo: bytes, hi: bytes) -> List[bytes]:
        keys = self.keys_by_table.get(table, [])
        return keys[bisect.bisect_left(keys, lo):bisect.bisect_left(keys, hi)]

    def point_observations(self, r: _Read) -> Iterable[Tuple[bytes, int]]:
        """(key, observed index) for every non-own key a read depends on."""
        if r.key is not None:
            if r.key not in r.own:
                yield r.key, self.observed(r.table, r.key, r.snap)
            return
        for key in self.keys_in(r.table, r.lo, r.hi):
            if key not in r.own:
                yield key, self.observed(r.table, key, r.snap)

    def verify_reads(self, t: _Txn) -> None:
        """The engine returned exactly what the oracle says the snapshot shows."""
        for r in t.reads:
            if r.key is not None:
                if r.key in r.own:
                    want, src = r.own[r.key], t.id
                else:
                    _, w, want = self.entry(r.table, r.key, self.observed(r.table, r.key, r.snap))
                    src = w
                if r.value != want or (want is not None and r.source != src):
                    raise OracleError(
                        f"txn {t.id} read {r.table}/{r.key!r}: engine saw {r.value!r} from "
                        f"{r.source}, oracle expects {want!r} from {src}")
                continue
            expect = {}
            for key in self.keys_in(r.table, r.lo, r.hi):
                _, w, v = self.entry(r.table, key, self.observed(r.table, key, r.snap))
                if v is not None:
                    expect[key] = (v, w)
            for key, v in r.own.items():
                if v is None:
                    expect.pop(key, None)
                else:
                    expect[key] = (v, t.id)
            got = {k: (v, w) for k, v, w in r.result}
            if got != expect:
                raise OracleError(f"txn {t.id} scan {r.table} [{r.lo!r},{r.hi!r}): engine "
                                  f"returned {sorted(got.items())}, oracle expects {sorted(expect.items())}")


def build_graph(events: Sequence[HistoryEvent], verify: bool = True) -> DependencyGraph:
    return _build(History(events), verify)


def _build(h: History, verify: bool = True) -> DependencyGraph:
    nodes = {t.id for t in h.committed}
    edges: Set[Tuple[int, int, str]] = set()
    for entries in h.installed.values():
        for (_, a, _), (_, b, _) in zip(entries, entries[1:]):
            edges.add((a, b, "ww"))
    for t in h.committed:
        if verify:
            h.verify_reads(t)
        for r in t.reads:
            for key, i in h.point_observations(r):
                _, w, _ = h.entry(r.table, key, i)
                if w != INITIAL and w != t.id:
                    edges.add((w, t.id, "wr"))
                entries = h.installed.get((r.table, key), ())
                if i + 1 < len(entries):
                    nxt = entries[i + 1][1]
                    if nxt != t.id:
                        edges.add((t.id, nxt, "rw"))
    return DependencyGraph(nodes, edges)


def find_cycle(graph: DependencyGraph) -> Tuple[Optional[List[int]], Optional[List[int]]]:
    """A witness cycle, or None plus a serial order consistent with the graph."""
    g = graph.digraph()
    try:
        return None, list(nx.lexicographical_topological_sort(g))
    except nx.NetworkXUnfeasible:
        pass
    return [a for a, _ in nx.find_cycle(g)], None


TRUE_POSITIVE = "TruePositive"
FALSE_POSITIVE = "FalsePositive"


class Oracle:
    """Graph over the committed history plus per-abort classification."""

    def __init__(self, events: Sequence[HistoryEvent], verify: bool = True):
        self.history = History(events)
        self.graph = _build(self.history, verify)
        self._succ: Dict[int, Set[int]] = defaultdict(set)
        for a, b, _ in self.graph.edges:
            self._succ[a].add(b)

    def cycle(self):
        return find_cycle(self.graph)

    def classify_abort(self, txn_id: int) -> str:
        """TruePositive iff the victim, committed at its abort point, closes a cycle.

        The victim's writes are placed in the version order right where it
        aborted; they are visible to nobody. Only readers whose snapshot
        predates the abort can read the version it would have replaced.
        """
        h = self.history
        v = h.txns[txn_id]
        if v.abort_event is None:
            raise OracleError(f"transaction {txn_id} did not abort")
        p = h.commits_before[v.abort_event.seq] + 0.5
        outs: Set[int] = set()
        ins: Set[int] = set()
        for r in v.reads:
            for key, i in h.point_observations(r):
                _, w, _ = h.entry(r.table, key, i)
                if w != INITIAL:
                    ins.add(w)
                entries = h.installed.get((r.table, key), ())
                if i + 1 < len(entries):
                    outs.add(entries[i + 1][1])
        for (table, key), _ in v.writes.items():
            entries = h.installed.get((table, key), [])
            seqs = h._seqs.get((table, key), [])
            pos = bisect.bisect_left(seqs, p)
            if pos > 0:
                ins.add(entries[pos - 1][1])
            if pos < len(entries):
                outs.add(entries[pos][1])
            pred = pos - 1
            readers = h.point_readers.get((table, key), []) + [
                (t, r) for t, r in h.scanners.get(table, ()) if r.lo <= key < r.hi]
            for t, r in readers:
                if r.snap < p and key not in r.own and h.observed(table, key, r.snap) == pred:
                    ins.add(t.id)
        outs.discard(txn_id)
        ins.discard(txn_id)
        if outs & ins:
            return TRUE_POSITIVE
        seen, stack = set(outs), list(outs)
        while stack:
            n = stack.pop()
            for m in self._succ.get(n, ()):
                if m in ins:
                    return TRUE_POSITIVE
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return FALSE_POSITIVE

    def serialization_aborts(self) -> List[int]:
        return [t.id for t in self.history.txns.values()
                if t.abort_event is not None and t.abort_event.reason == "serialization"]

    def missed_flags(self, flagged: Set[Tuple[int, int]], exempt: Set[int] = frozenset()
                     ) -> Set[Tuple[int, int]]:
        """Concurrent serializable rw edges the engine never flagged."""
        txns = self.history.txns
        missing = set()
        for a, b in self.graph.of_kind("rw"):
            ta, tb = txns[a], txns[b]
            if ta.mode != "ssi" or tb.mode != "ssi" or a in exempt:
                continue
            if ta.commit_seq <= tb.snap:
                continue  # reader finished before the writer started
            if (a, b) not in flagged:
                missing.add((a, b))
        return missing

    def snapshot_verdict(self, txn_id: int, snap: Optional[int] = None) -> str:
        """Brute-force safe-snapshot verdict for a read-only transaction.

        Unsafe iff a read/write serializable transaction live at its begin
        committed with an rw edge out to a transaction committed at or before
        the snapshot. Pending if some such transaction never finished.
        """
        h = self.history
        t = h.txns[txn_id]
        snap = t.snap if snap is None else snap
        rw = self.graph.of_kind("rw")
        pending = False
        for m in h.txns.values():
            if m.id == txn_id or m.mode != "ssi" or m.read_only or m.begin > t.begin:
                continue
            end = self._end_event(m)
            if end is not None and end < t.begin:
                continue
            if m.status == "committed":
                if any(a == m.id and h.txns[b].commit_seq <= snap for a, b in rw):
                    return "unsafe"
            elif m.status != "aborted":
                pending = True
        return "pending" if pending else "safe"

    def _end_event(self, t: _Txn) -> Optional[int]:
        if t.abort_event is not None:
            return t.abort_event.seq
        for ev in self.history.events[t.begin:]:
            if ev.txn == t.id and ev.kind == "commit":
                return ev.seq
        return None
