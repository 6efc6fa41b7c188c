"""The transaction engine.

All shared state lives behind one re-entrant lock; every public operation
runs atomically under it. An operation that has to wait raises
``WouldBlock`` internally before touching anything. In threaded mode the
engine waits on a condition variable and retries; in deterministic mode the
exception reaches the schedule executor, which suspends the session and
retries later.
"""

from __future__ import annotations

import dataclasses
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple, TypeVar, Union

from .errors import (AbortError, CannotAbortPrepared, DeadlockDetected, DeferrableTimeout,
                     DuplicateGid, InvalidOptions, ReadOnlyViolation, SerializationFailure, TxnNotActive,
                     UnknownGid, WouldBlock, WwConflict)
from .history import HistoryEvent
from .locks import DUMMY, LockTarget, PromotionPolicy, S2plLockManager, SireadLockManager
from .memory import MemoryGovernor
from .mvcc import (Mode, Snapshot, Status, Table, TupleVersion, TxnHandle, TxnRecord,
                   committed_in, visible)
from .readonly import ReadOnlyOptimizer, Verdict
from .ssi import ConflictGraph, Pseudo, SerializableNode, Victim
from .twophase import PreparedRecord, PreparedStore, check_gid

T = TypeVar("T")
Bytes = Union[str, bytes]


def as_bytes(x: Bytes) -> bytes:
    if isinstance(x, bytes):
        return x
    if isinstance(x, str):
        return x.encode("utf-8")
    raise TypeError(f"expected str or bytes, got {type(x).__name__}")


@dataclass
class EngineConfig:
    pages_per_table: int = 64
    max_keys_per_page: int = 16
    max_pages_per_relation: int = 8
    max_total_locks: int = 10000
    max_committed_tracked: int = 256
    summary_table_capacity: int = 65536
    deferrable_max_iterations: int = 100
    deferrable_timeout: Optional[float] = None
    data_dir: Optional[str] = None
    fsync: bool = True
    deterministic: bool = False
    record_history: bool = False
    # keep every flagged rw edge, for the oracle's dual-detection check
    track_flags: bool = False

    def policy(self) -> PromotionPolicy:
        return PromotionPolicy(self.pages_per_table, self.max_keys_per_page,
                               self.max_pages_per_relation, self.max_total_locks)


class Engine:
    def __init__(self, config: Optional[EngineConfig] = None, **overrides):
        cfg = config or EngineConfig()
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
        if cfg.max_committed_tracked < 1 or cfg.summary_table_capacity < 1:
            raise InvalidOptions("capacities must be >= 1")
        self.config = cfg
        self._mutex = threading.RLock()
        self._cond = threading.Condition(self._mutex)
        self.tables: Dict[str, Table] = {}
        self.clog: Dict[int, TxnRecord] = {}
        self.txns: Dict[int, TxnHandle] = {}  # active, preparing or prepared
        self.prepared: Dict[str, TxnHandle] = {}
        self._next_id = 1
        self._vid = 0
        self.last_commit_seq = 0
        self.siread = SireadLockManager(cfg.policy(), make_room=self._make_room)
        self.s2pl = S2plLockManager(cfg.pages_per_table)
        self.graph = ConflictGraph()
        if cfg.track_flags:
            self.graph.flag_log = set()
        self.readonly = ReadOnlyOptimizer()
        self.governor = MemoryGovernor(self.graph, self.siread, cfg.max_committed_tracked,
                                       cfg.summary_table_capacity)
        self.waits_for: Dict[int, frozenset] = {}
        self.history: Optional[List[HistoryEvent]] = [] if cfg.record_history else None
        self.store: Optional[PreparedStore] = None
        if cfg.data_dir is not None:
            self.store = PreparedStore(cfg.data_dir, cfg.fsync)
            self._recover()
        self.peak_nodes_tracked = 0
        self.peak_locks_held = 0

    @classmethod
    def recover(cls, data_dir: str, config: Optional[EngineConfig] = None, **overrides) -> "Engine":
        """Start an engine from ``data_dir``, reinstating any prepared transactions."""
        return cls(config, data_dir=data_dir, **overrides)

    # -- small helpers

    def _log(self, txn: TxnHandle, kind: str, **kw) -> None:
        if self.history is not None:
            self.history.append(HistoryEvent(len(self.history), txn.id, kind, **kw))

    def table(self, name: str) -> Table:
        t = self.tables.get(name)
        if t is None:
            t = self.tables[name] = Table(name)
        return t

    def drop_table(self, name: str) -> None:
        with self._mutex:
            if any(tbl.name == name for t in self.txns.values() for tbl, _ in t.row_locks):
                raise InvalidOptions(f"table {name!r} has uncommitted writes")
            self.tables.pop(name, None)

    def _snapshot(self) -> Snapshot:
        active = frozenset(t for t, h in self.txns.items())
        xmax = self._next_id
        xmin = min(active, default=xmax)
        return Snapshot(xmin, xmax, active, self.last_commit_seq)

    def node(self, txn: TxnHandle) -> Optional[SerializableNode]:
        """The SSI node, or None when the transaction is not tracked."""
        if txn.mode is not Mode.SERIALIZABLE or txn.safe:
            return None
        return self.graph.get(txn.id)

    def _check_active(self, txn: TxnHandle) -> None:
        if txn.pending_error is not None:
            err, txn.pending_error = txn.pending_error, None
            raise err
        if txn.status is not Status.ACTIVE:
            raise TxnNotActive(f"transaction {txn.id} is {txn.status.value}")

    def _run(self, txn: Optional[TxnHandle], fn: Callable[[], T],
             deadline: Optional[float] = None) -> T:
        with self._cond:
            while True:
                try:
                    result = fn()
                except WouldBlock as wb:
                    if txn is not None and self._note_wait(txn, wb):
                        continue
                    if self.config.deterministic:
                        raise
                    timeout = None
                    if deadline is not None:
                        timeout = deadline - time.monotonic()
                        if timeout <= 0:
                            self._on_timeout(txn)
                    self._cond.wait(timeout)
                    continue
                if txn is not None:
                    self.waits_for.pop(txn.id, None)
                return result

    def _on_timeout(self, txn: TxnHandle) -> None:
        err = DeferrableTimeout(f"no safe snapshot for transaction {txn.id} before the timeout")
        self._abort(txn, "deferrable-timeout")
        raise err

    # -- deadlock detection over the waits-for graph

    def _note_wait(self, txn: TxnHandle, wb: WouldBlock) -> bool:
        """Record the wait; returns True if a deadlock was broken in the caller's favour."""
        if wb.reason == "deferrable":
            return False
        self.waits_for[txn.id] = wb.holders
        cycle = self._find_wait_cycle(txn.id)
        if cycle is None:
            return False
        victim = self.txns[max(cycle)]
        err = DeadlockDetected(f"deadlock detected among transactions {sorted(cycle)}")
        if victim is txn:
            self._abort(txn, "deadlock")
            raise err
        self._abort(victim, "deadlock", err)
        return True

    def _find_wait_cycle(self, start: int) -> Optional[List[int]]:
        path: List[int] = []
        on_path = set()
        done = set()

        def dfs(t: int) -> Optional[List[int]]:
            path.append(t)
            on_path.add(t)
            for nxt in sorted(self.waits_for.get(t, ())):
                if nxt in on_path:
                    return path[path.index(nxt):]
                if nxt not in done and nxt in self.waits_for:
                    found = dfs(nxt)
                    if found:
                        return found
            on_path.discard(t)
            done.add(t)
            path.pop()
            return None

        return dfs(start)

    # -- begin

    def begin(self, mode: Union[Mode, str] = Mode.SERIALIZABLE, read_only: bool = False,
              deferrable: bool = False, timeout: Optional[float] = None) -> TxnHandle:
        if isinstance(mode, str):
            mode = Mode.parse(mode)
        if deferrable and not (read_only and mode is Mode.SERIALIZABLE):
            raise InvalidOptions("DEFERRABLE requires a READ ONLY SERIALIZABLE transaction")
        with self._mutex:
            txid = self._next_id
            self._next_id += 1
            txn = TxnHandle(txid, mode, read_only, deferrable, self._snapshot())
            self.clog[txid] = TxnRecord(Status.ACTIVE, mode)
            self.txns[txid] = txn
            if mode is Mode.SERIALIZABLE:
                self._register(txn)
            self._log(txn, "begin", snap_seq=txn.snapshot.seq, mode=mode.value, read_only=read_only)
        if deferrable and not self.config.deterministic:
            if timeout is None:
                timeout = self.config.deferrable_timeout
            deadline = None if timeout is None else time.monotonic() + timeout
            self._run(txn, lambda: self._await_safe(txn), deadline)
        return txn

    def _register(self, txn: TxnHandle) -> None:
        if txn.read_only:
            rw = [t.id for t in self.txns.values()
                  if t.mode is Mode.SERIALIZABLE and not t.read_only and t is not txn]
            txn.watch = self.readonly.watch(txn.id, txn.snapshot.seq, rw)
            if txn.watch.verdict is Verdict.SAFE:
                txn.safe = True
                return
            if txn.deferrable:
                # waits for a verdict without reading, so needs no tracking
                txn.waiting_safe = True
                return
        self.graph.add(SerializableNode(txn, txn.snapshot.seq))

    def wait_safe(self, txn: TxnHandle) -> None:
        """Deterministic-mode half of a deferrable begin: blocks until the snapshot is safe."""
        self._run(txn, lambda: self._await_safe(txn))

    def _await_safe(self, txn: TxnHandle) -> None:
        self._check_active(txn)
        while txn.waiting_safe:
            verdict = txn.watch.verdict
            if verdict is Verdict.SAFE:
                txn.waiting_safe = False
                txn.safe = True
            elif verdict is Verdict.PENDING:
                raise WouldBlock(txn.watch.pending_rw_set, "deferrable")
            else:
                if txn.snapshot_attempts >= self.config.deferrable_max_iterations:
                    self._abort(txn, "deferrable-timeout")
                    raise DeferrableTimeout(
                        f"no safe snapshot after {txn.snapshot_attempts} attempts")
                txn.snapshot_attempts += 1
                txn.snapshot = self._snapshot()
                rw = [t.id for t in self.txns.values()
                      if t.mode is Mode.SERIALIZABLE and not t.read_only]
                txn.watch = self.readonly.watch(txn.id, txn.snapshot.seq, rw)

    # -- reads

    def _resolve_chain(self, txn: TxnHandle, chain: List[TupleVersion]
                       ) -> Tuple[Optional[TupleVersion], Optional[int]]:
        """Visible version of a chain plus the writer of its immediate successor.

        The successor writer is the transaction that superseded what ``txn``
        observes (the visible version, or the absence of one) without being
        part of ``txn``'s snapshot; it is the rw-antidependency target.
        """
        snap, me = txn.snapshot, txn.id
        base_i = None
        for i in range(len(chain) - 1, -1, -1):
            v = chain[i]
            if v.xmin == me or committed_in(snap, v.xmin, self.clog):
                base_i = i
                break
        if base_i is None:
            return None, (chain[0].xmin if chain else None)
        base = chain[base_i]
        if visible(snap, base, me, self.clog):
            succ = base.xmax if base.xmax is not None and base.xmax != me else None
            return base, succ
        if base_i + 1 < len(chain) and chain[base_i + 1].xmin != me:
            return None, chain[base_i + 1].xmin
        return None, None

    def _prepare_read(self, txn: TxnHandle) -> None:
        self._check_active(txn)
        if txn.waiting_safe:
            self._await_safe(txn)

    def read(self, txn: TxnHandle, table: str, key: Bytes) -> Optional[bytes]:
        key = as_bytes(key)
        return self._run(txn, lambda: self._read(txn, table, key))

    def _read(self, txn: TxnHandle, table: str, key: bytes) -> Optional[bytes]:
        self._prepare_read(txn)
        if txn.mode is Mode.S2PL:
            self.s2pl.acquire_read(txn.id, LockTarget.key(table, key))
            txn.snapshot = self._snapshot()
        tbl = self.table(table)
        version, succ = self._resolve_chain(txn, tbl.chain(key))
        value = version.value if version is not None else None
        # logged before conflict processing: a victim's last read still counts
        self._log(txn, "read", table=table, key=key, value=value,
                  source=version.xmin if version is not None else None,
                  snap_seq=txn.snapshot.seq)
        node = self.node(txn)
        if node is not None:
            self.siread.acquire(txn.id, LockTarget.key(table, key))
            if succ is not None:
                self._mvcc_conflict(node, succ)
        return value

    def scan(self, txn: TxnHandle, table: str, lo: Bytes, hi: Bytes) -> List[Tuple[bytes, bytes]]:
        lo, hi = as_bytes(lo), as_bytes(hi)
        if lo > hi:
            raise InvalidOptions("scan bounds must satisfy lo <= hi")
        return self._run(txn, lambda: self._scan(txn, table, lo, hi))

    def _scan(self, txn: TxnHandle, table: str, lo: bytes, hi: bytes) -> List[Tuple[bytes, bytes]]:
        self._prepare_read(txn)
        if txn.mode is Mode.S2PL:
            if lo < hi:
                self.s2pl.acquire_read(txn.id, LockTarget.range(table, lo, hi))
            txn.snapshot = self._snapshot()
        tbl = self.table(table)
        rows, seen, succs = [], [], []
        for key in tbl.keys_in(lo, hi):
            version, succ = self._resolve_chain(txn, tbl.chain(key))
            if version is not None:
                rows.append((key, version.value))
                seen.append((key, version.value, version.xmin))
            if succ is not None:
                succs.append(succ)
        self._log(txn, "scan", table=table, lo=lo, hi=hi, result=tuple(seen),
                  snap_seq=txn.snapshot.seq)
        node = self.node(txn)
        if node is not None:
            if lo < hi:
                self.siread.acquire(txn.id, LockTarget.range(table, lo, hi))
            for succ in dict.fromkeys(succs):
                self._mvcc_conflict(node, succ)
        return rows

    def _mvcc_conflict(self, reader: SerializableNode, writer_id: int) -> None:
        if self.graph.get(reader.id) is not reader:
            return  # an earlier conflict in the same scan made the reader safe
        rec = self.clog.get(writer_id)
        if rec is None or rec.status is Status.ABORTED:
            return
        lookup = self.governor.summary_lookup(writer_id, rec.mode is Mode.SERIALIZABLE)
        if lookup.kind == "tracked":
            writer = lookup.node
            if self.graph.flag(reader, writer):
                self._settle(lambda: self.graph.check_edge(reader, writer, reader), reader)
            return
        if lookup.kind != "summarized":
            return
        if self.graph.flag_log is not None:
            self.graph.flag_log.add((reader.id, writer_id))
        # reader -> summarized writer -> whoever the writer conflicted out to
        t2 = Pseudo(rec.commit_seq, "summarized")
        t3 = Pseudo(lookup.earliest_out_commit, "summarized-out")
        if self.graph.actionable(reader, t2, t3):
            self._fail(reader, (reader.id, writer_id, None))
        reader.fold_out(rec.commit_seq)
        self._settle(lambda: self.graph.check_dangerous(reader, reader), reader)

    # -- conflict resolution

    def _settle(self, check: Callable[[], Optional[Victim]], caller: SerializableNode) -> None:
        """Enact victims until ``check`` finds nothing actionable."""
        while True:
            victim = check()
            if victim is None:
                return
            err = SerializationFailure(
                "could not serialize access due to read/write dependencies among transactions",
                structure=victim.structure, prepared_partner=victim.prepared_partner)
            if victim.node is caller:
                self._abort(caller.txn, "serialization", None, victim.structure)
                raise err
            self._abort(victim.node.txn, "serialization", err, victim.structure)

    def _fail(self, node: SerializableNode, structure) -> None:
        err = SerializationFailure(
            "could not serialize access due to read/write dependencies among transactions",
            structure=structure)
        self._abort(node.txn, "serialization", None, structure)
        raise err

    # -- writes

    def write(self, txn: TxnHandle, table: str, key: Bytes, value: Bytes) -> None:
        key, value = as_bytes(key), as_bytes(value)
        self._run(txn, lambda: self._write(txn, table, key, value))

    def delete(self, txn: TxnHandle, table: str, key: Bytes) -> bool:
        """Delete ``key``; returns False if there was no visible row to delete."""
        key = as_bytes(key)
        return self._run(txn, lambda: self._write(txn, table, key, None))

    def _write(self, txn: TxnHandle, table: str, key: bytes, value: Optional[bytes]) -> bool:
        self._check_active(txn)
        if txn.read_only:
            raise ReadOnlyViolation(f"cannot write in read-only transaction {txn.id}")
        tbl = self.table(table)
        if txn.mode is Mode.S2PL:
            self.s2pl.acquire_write(txn.id, table, key)
        holder = tbl.write_locks.get(key)
        if holder is not None and holder != txn.id:
            if txn.mode is not Mode.S2PL and any(self._superseded(txn, v) for v in tbl.chain(key)[-2:]):
                # doomed either way; failing now also keeps a waiter from starving
                self._abort(txn, "ww-conflict")
                raise WwConflict()
            raise WouldBlock({holder}, "row")
        if txn.mode is Mode.S2PL:
            txn.snapshot = self._snapshot()
        chain = tbl.chain(key)
        head = chain[-1] if chain else None
        if head is not None and self._superseded(txn, head):
            self._abort(txn, "ww-conflict")
            raise WwConflict()
        live = head is not None and head.xmax is None
        effective = value is not None or live
        if effective:
            # logged before conflict processing so a victim's attempted write counts
            if value is None:
                self._log(txn, "delete", table=table, key=key, snap_seq=txn.snapshot.seq)
            else:
                self._log(txn, "write", table=table, key=key, value=value, snap_seq=txn.snapshot.seq)
        node = self.node(txn)
        if node is not None:
            self._write_conflicts(node, table, key)
        if holder is None:
            tbl.write_locks[key] = txn.id
            txn.row_locks.append((tbl, key))
        if not effective:
            return False
        if head is not None and head.xmin == txn.id and head.xmax is None:
            if value is None:
                head.xmax = txn.id
                txn.deleted.append(head)
            else:
                head.value = value
        else:
            if live:
                head.xmax = txn.id
                txn.deleted.append(head)
            if value is not None:
                self._vid += 1
                version = TupleVersion(self._vid, key, value, txn.id)
                tbl.append(version)
                txn.created.append((tbl, version))
        txn.write_set.add((table, key))
        if node is not None:
            self.siread.drop_own_key_lock(txn.id, table, key)
        return True

    def _superseded(self, txn: TxnHandle, head: TupleVersion) -> bool:
        """First-updater-wins: the head changed after ``txn``'s snapshot."""
        for xid in (head.xmin, head.xmax):
            if xid is None or xid == txn.id:
                continue
            if self.clog[xid].status is Status.COMMITTED and not committed_in(txn.snapshot, xid, self.clog):
                return True
        return False

    def _write_conflicts(self, writer: SerializableNode, table: str, key: bytes) -> None:
        for holder, seq in self.siread.conflicting_readers(writer.id, table, key):
            if holder == DUMMY:
                if seq is not None and seq > writer.snapshot_seq and not writer.summary_in:
                    writer.summary_in = True
                    self._settle(lambda: self.graph.check_dangerous(writer, writer), writer)
                continue
            reader = self.graph.get(holder)
            if reader is None or reader.txn.status is Status.ABORTED:
                continue
            if reader.committed and reader.commit_seq <= writer.snapshot_seq:
                continue
            if self.graph.flag(reader, writer):
                self._settle(lambda: self.graph.check_edge(reader, writer, writer), writer)

    # -- commit / abort

    def commit(self, txn: TxnHandle) -> int:
        with self._cond:
            if txn.status is Status.PREPARED:
                return self._commit_prepared(txn)
            self._check_active(txn)
            node = self.node(txn)
            if node is not None:
                self._settle(lambda: self.graph.precommit(node, self.last_commit_seq + 1), node)
            return self._finish_commit(txn)

    def _finish_commit(self, txn: TxnHandle) -> int:
        self.last_commit_seq += 1
        seq = txn.commit_seq = self.last_commit_seq
        txn.status = Status.COMMITTED
        rec = self.clog[txn.id]
        rec.status, rec.commit_seq = Status.COMMITTED, seq
        for _, version in txn.created:
            version.committed_xmin = seq
        for version in txn.deleted:
            version.committed_xmax = seq
        self._release_row_locks(txn)
        self.s2pl.release(txn.id)
        self.txns.pop(txn.id, None)
        self.waits_for.pop(txn.id, None)
        if txn.gid is not None:
            self.prepared.pop(txn.gid, None)
        node = self.graph.get(txn.id)
        if node is not None:
            node.commit_seq = seq
            node.prepared = False
        self._log(txn, "commit", commit_seq=seq)
        self.readonly.unwatch(txn.id)
        if txn.mode is Mode.SERIALIZABLE and not txn.read_only:
            eoc = self.graph.earliest_out_commit(node) if node is not None else None
            self._apply_verdicts(self.readonly.on_rw_resolution(txn.id, eoc, committed=True))
        if node is not None:
            self.governor.admit(node)
        self._housekeeping()
        return seq

    def _release_row_locks(self, txn: TxnHandle) -> None:
        for tbl, key in txn.row_locks:
            if tbl.write_locks.get(key) == txn.id:
                del tbl.write_locks[key]
        txn.row_locks.clear()

    def abort(self, txn: TxnHandle) -> None:
        with self._cond:
            if txn.status is Status.ABORTED:
                if txn.pending_error is not None:
                    txn.pending_error = None
                    return
                raise TxnNotActive(f"transaction {txn.id} already aborted")
            if txn.status in (Status.PREPARED, Status.PREPARING):
                raise CannotAbortPrepared(
                    f"transaction {txn.id} is prepared; use rollback_prepared")
            if txn.status is Status.COMMITTED:
                raise TxnNotActive(f"transaction {txn.id} already committed")
            self._abort(txn, "user")

    def _abort(self, txn: TxnHandle, reason: str, pending: Optional[AbortError] = None,
               structure=None) -> None:
        for tbl, version in txn.created:
            chain = tbl.rows.get(version.key)
            if chain is not None and version in chain:
                chain.remove(version)
                if not chain:
                    tbl.remove_key(version.key)
        for version in txn.deleted:
            if version.xmax == txn.id:
                version.xmax = None
        txn.created.clear()
        txn.deleted.clear()
        self._release_row_locks(txn)
        self.s2pl.release(txn.id)
        node = self.graph.get(txn.id)
        if node is not None:
            self.siread.release_holder(txn.id)
            self.graph.remove(node)
        elif txn.mode is Mode.SERIALIZABLE:
            self.siread.release_holder(txn.id)
        txn.status = Status.ABORTED
        txn.abort_reason = reason
        txn.pending_error = pending
        self.clog[txn.id].status = Status.ABORTED
        self.txns.pop(txn.id, None)
        self.waits_for.pop(txn.id, None)
        if txn.gid is not None:
            self.prepared.pop(txn.gid, None)
        self._log(txn, "abort", reason=reason, structure=structure)
        self.readonly.unwatch(txn.id)
        if txn.mode is Mode.SERIALIZABLE and not txn.read_only:
            self._apply_verdicts(self.readonly.on_rw_resolution(txn.id, committed=False))
        self._housekeeping()

    def _apply_verdicts(self, watches) -> None:
        for w in watches:
            txn = self.txns.get(w.txn)
            if txn is None or w.verdict is not Verdict.SAFE or txn.waiting_safe:
                continue
            # safe snapshot: stop tracking altogether
            txn.safe = True
            node = self.graph.get(txn.id)
            self.siread.release_holder(txn.id)
            if node is not None:
                self.graph.remove(node)

    def _housekeeping(self) -> None:
        horizon = None
        rw_active = False
        for t in self.txns.values():
            if t.mode is not Mode.SERIALIZABLE:
                continue
            node = self.graph.get(t.id)
            if node is None:
                continue
            if horizon is None or node.snapshot_seq < horizon:
                horizon = node.snapshot_seq
            if not t.read_only:
                rw_active = True
        self.governor.on_commit_cleanup(horizon)
        if not rw_active and len(self.governor.ring):
            self.governor.readonly_only_cleanup()
        self.governor.enforce_capacity()
        self.peak_nodes_tracked = max(self.peak_nodes_tracked, len(self.governor.ring))
        self.peak_locks_held = max(self.peak_locks_held, len(self.siread))
        self._cond.notify_all()

    def _make_room(self) -> bool:
        return self.governor.summarize_oldest()

    # -- two-phase commit

    def prepare(self, txn: TxnHandle, gid: str) -> None:
        check_gid(gid)
        with self._cond:
            self._check_active(txn)
            if gid in self.prepared or (self.store is not None and gid in self.store.records):
                raise DuplicateGid(f"transaction identifier {gid!r} is already in use")
            node = self.node(txn)
            if node is not None:
                self._settle(lambda: self.graph.precommit(node, self.last_commit_seq + 1), node)
            record = self._record(txn, gid)
            txn.status = Status.PREPARING
            self.clog[txn.id].status = Status.PREPARING
            self.prepared[gid] = txn
            txn.gid = gid
        try:
            if self.store is not None:
                self.store.add(record)
        except BaseException:
            with self._cond:
                self.prepared.pop(gid, None)
                txn.gid = None
                txn.status = Status.ACTIVE
                self._abort(txn, "prepare-failed")
            raise
        with self._cond:
            txn.status = Status.PREPARED
            self.clog[txn.id].status = Status.PREPARED
            if node is not None:
                node.prepared = True
            self._log(txn, "prepare", gid=gid)

    def _record(self, txn: TxnHandle, gid: str) -> PreparedRecord:
        writes = []
        for table, key in sorted(txn.write_set):
            head = self.table(table).chain(key)
            head = head[-1] if head else None
            value = head.value if head is not None and head.xmin == txn.id and head.xmax is None else None
            writes.append((table, key, value))
        locks = self.siread.targets_of(txn.id) if txn.mode is Mode.SERIALIZABLE else []
        return PreparedRecord(gid, txn.id, writes, locks, txn.snapshot.seq)

    def prepared_gids(self) -> List[str]:
        with self._mutex:
            return sorted(self.prepared)

    def commit_prepared(self, gid: str) -> int:
        with self._cond:
            txn = self.prepared.get(gid)
            if txn is None or txn.status is not Status.PREPARED:
                raise UnknownGid(f"prepared transaction {gid!r} does not exist")
            return self._commit_prepared(txn)

    def _commit_prepared(self, txn: TxnHandle) -> int:
        node = self.graph.get(txn.id)
        if node is not None:
            self._settle(lambda: self.graph.precommit(node, self.last_commit_seq + 1,
                                                      allow_self=False), None)
        if self.store is not None and txn.gid in self.store.records:
            self.store.remove(txn.gid)
        return self._finish_commit(txn)

    def rollback_prepared(self, gid: str) -> None:
        with self._cond:
            txn = self.prepared.get(gid)
            if txn is None or txn.status is not Status.PREPARED:
                raise UnknownGid(f"prepared transaction {gid!r} does not exist")
            if self.store is not None and gid in self.store.records:
                self.store.remove(gid)
            self._abort(txn, "rollback-prepared")

    def crash_restart(self) -> None:
        """Simulate a server restart: in-progress work is lost, prepared work survives.

        Committed data stays in memory (as if it had been logged); every
        non-prepared transaction is aborted and all SSI state is rebuilt from
        the prepared records, as a fresh process would see it.
        """
        with self._cond:
            for txn in sorted(self.txns.values(), key=lambda t: t.id):
                if txn.status is Status.ACTIVE:
                    self._abort(txn, "crash", TxnNotActive("server restarted"))
            survivors = {t.id: (self.store.records[t.gid].siread_locks if self.store is not None
                                else self.siread.targets_of(t.id))
                         for t in self.txns.values()}
            self.graph.nodes.clear()
            self.siread.clear()
            self.governor.clear()
            self.readonly.clear()
            self.waits_for.clear()
            for txn in self.txns.values():
                txn.snapshot = Snapshot(txn.id, txn.id + 1, frozenset(), txn.snapshot.seq)
                if txn.mode is Mode.SERIALIZABLE:
                    self._reinstate_node(txn, survivors[txn.id])

    def _reinstate_node(self, txn: TxnHandle, locks: List[LockTarget]) -> None:
        node = SerializableNode(txn, 0)
        node.prepared = True
        node.conservative_in = node.conservative_out = True
        self.graph.add(node)
        for target in locks:
            self.siread.acquire(txn.id, target)

    def _recover(self) -> None:
        for rec in self.store.load():
            txn = TxnHandle(rec.txn, Mode.SERIALIZABLE, False, False,
                            Snapshot(rec.txn, rec.txn + 1, frozenset(), rec.prepared_at),
                            status=Status.PREPARED, gid=rec.gid)
            self._next_id = max(self._next_id, rec.txn + 1)
            self.clog[rec.txn] = TxnRecord(Status.PREPARED, Mode.SERIALIZABLE)
            self.txns[rec.txn] = txn
            self.prepared[rec.gid] = txn
            for table, key, value in rec.writes:
                tbl = self.table(table)
                tbl.write_locks[key] = txn.id
                txn.row_locks.append((tbl, key))
                txn.write_set.add((table, key))
                if value is not None:
                    self._vid += 1
                    version = TupleVersion(self._vid, key, value, txn.id)
                    tbl.append(version)
                    txn.created.append((tbl, version))
            self._reinstate_node(txn, rec.siread_locks)

    # -- maintenance and introspection

    def vacuum(self) -> int:
        """Remove versions deleted before every live snapshot; returns the count."""
        with self._mutex:
            seqs = [t.snapshot.seq for t in self.txns.values()]
            horizon = min(seqs) if seqs else self.last_commit_seq
            removed = 0
            for tbl in self.tables.values():
                for key in list(tbl.rows):
                    chain = tbl.rows[key]
                    keep = [v for v in chain
                            if v.committed_xmax is None or v.committed_xmax > horizon]
                    removed += len(chain) - len(keep)
                    if not keep:
                        tbl.remove_key(key)
                    elif len(keep) != len(chain):
                        tbl.rows[key] = keep
            return removed

    def snapshot_table(self, table: str) -> Dict[bytes, bytes]:
        """Latest committed state of ``table``."""
        with self._mutex:
            out = {}
            for key, chain in self.table(table).rows.items():
                for v in reversed(chain):
                    if v.committed_xmin is not None:
                        if v.committed_xmax is None:
                            out[key] = v.value
                        break
            return dict(sorted(out.items()))

    def stats(self) -> Dict[str, int]:
        with self._mutex:
            return {
                "locks_held": len(self.siread),
                "nodes_tracked": len(self.governor.ring),
                "summarized_total": self.governor.summarized_total,
                "cleanup_runs": self.governor.cleanup_runs,
                "summary_entries": len(self.governor.summary),
                "s2pl_locks": len(self.s2pl),
                "peak_nodes_tracked": self.peak_nodes_tracked,
                "peak_locks_held": self.peak_locks_held,
            }

    def dump_graph(self) -> List[dict]:
        with self._mutex:
            return self.graph.dump()
