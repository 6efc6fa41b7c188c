"""Lock tables.

``SireadLockManager`` keeps non-blocking SIREAD locks at relation, page, key
and range granularity. Writers look for conflicting holders coarsest first;
promotion always installs the coarse lock before dropping the fine ones, so
a check running in that order never misses a holder. No intention locks.

``S2plLockManager`` is the blocking read/write table used by the strict
two-phase locking baseline. It reuses ``LockTarget`` but never promotes.
"""

from __future__ import annotations

import enum
import zlib
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Set, Tuple

from .errors import LockTableFull, WouldBlock

# Holder id used for locks consolidated from summarized transactions.
DUMMY = 0


class LockMode(enum.Enum):
    SIREAD = "siread"
    READ = "read"
    WRITE = "write"


class LockTarget(NamedTuple):
    kind: str  # "relation" | "page" | "key" | "range"
    table: str
    a: object = None  # page number, key, or range low bound
    b: object = None  # range high bound

    @classmethod
    def relation(cls, table):
        return cls("relation", table)

    @classmethod
    def page(cls, table, page_no):
        return cls("page", table, page_no)

    @classmethod
    def key(cls, table, key):
        return cls("key", table, key)

    @classmethod
    def range(cls, table, lo, hi):
        if not lo < hi:
            raise ValueError("range lock must be non-empty")
        return cls("range", table, lo, hi)

    def covers(self, table: str, key: bytes, pages: int) -> bool:
        if table != self.table:
            return False
        if self.kind == "relation":
            return True
        if self.kind == "page":
            return page_of(key, pages) == self.a
        if self.kind == "key":
            return key == self.a
        return self.a <= key < self.b

    def encode(self) -> str:
        if self.kind == "relation":
            return f"R {self.table}"
        if self.kind == "page":
            return f"G {self.table} {self.a}"
        if self.kind == "key":
            return f"K {self.table} {self.a.hex()}"
        return f"N {self.table} {self.a.hex()} {self.b.hex()}"

    @classmethod
    def decode(cls, text: str) -> "LockTarget":
        parts = text.split(" ")
        tag, table = parts[0], parts[1]
        if tag == "R" and len(parts) == 2:
            return cls.relation(table)
        if tag == "G" and len(parts) == 3:
            return cls.page(table, int(parts[2]))
        if tag == "K" and len(parts) == 3:
            return cls.key(table, bytes.fromhex(parts[2]))
        if tag == "N" and len(parts) == 4:
            return cls.range(table, bytes.fromhex(parts[2]), bytes.fromhex(parts[3]))
        raise ValueError(f"bad lock target encoding: {text!r}")


def page_of(key: bytes, pages: int) -> int:
    return zlib.crc32(key) % pages


@dataclass
class PromotionPolicy:
    pages_per_table: int = 64
    max_keys_per_page: int = 16
    max_pages_per_relation: int = 8
    max_total_locks: int = 10000

    def __post_init__(self):
        for name in ("pages_per_table", "max_keys_per_page",
                     "max_pages_per_relation", "max_total_locks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class SireadLock:
    __slots__ = ("target", "holders", "max_holder_commit_seq")

    def __init__(self, target: LockTarget):
        self.target = target
        self.holders: Set[int] = set()
        self.max_holder_commit_seq: Optional[int] = None

    def __repr__(self):
        return f"SireadLock({self.target}, holders={sorted(self.holders)})"


class SireadLockManager:
    mode = LockMode.SIREAD

    def __init__(self, policy: Optional[PromotionPolicy] = None,
                 make_room: Optional[Callable[[], bool]] = None):
        self.policy = policy or PromotionPolicy()
        self.locks: Dict[LockTarget, SireadLock] = {}
        self.by_holder: Dict[int, Set[LockTarget]] = defaultdict(set)
        self.ranges: Dict[str, Set[LockTarget]] = defaultdict(set)
        self._keys_in_page: Dict[Tuple[int, str, int], int] = defaultdict(int)
        self._pages: Dict[Tuple[int, str], int] = defaultdict(int)
        self._ranges_held: Dict[Tuple[int, str], int] = defaultdict(int)
        # engine hook that frees space (summarization); returns True on progress
        self.make_room = make_room
        self.promotions = 0

    def __len__(self):
        return len(self.locks)

    def page(self, key: bytes) -> int:
        return page_of(key, self.policy.pages_per_table)

    def holds(self, holder: int, target: LockTarget) -> bool:
        return target in self.by_holder.get(holder, ())

    def covered(self, holder: int, target: LockTarget) -> bool:
        held = self.by_holder.get(holder)
        if not held:
            return False
        if target in held or LockTarget.relation(target.table) in held:
            return True
        if target.kind == "key":
            return LockTarget.page(target.table, self.page(target.a)) in held
        return False

    # -- internal add/remove keeping the counters straight

    def _add(self, holder: int, target: LockTarget, seq: Optional[int] = None) -> None:
        lock = self.locks.get(target)
        if lock is None:
            lock = self.locks[target] = SireadLock(target)
            if target.kind == "range":
                self.ranges[target.table].add(target)
        if seq is not None and (lock.max_holder_commit_seq is None
                                or seq > lock.max_holder_commit_seq):
            lock.max_holder_commit_seq = seq
        if holder in lock.holders:
            return
        lock.holders.add(holder)
        self.by_holder[holder].add(target)
        if target.kind == "key":
            self._keys_in_page[(holder, target.table, self.page(target.a))] += 1
        elif target.kind == "page":
            self._pages[(holder, target.table)] += 1
        elif target.kind == "range":
            self._ranges_held[(holder, target.table)] += 1

    def _remove(self, holder: int, target: LockTarget) -> Optional[int]:
        lock = self.locks.get(target)
        if lock is None or holder not in lock.holders:
            return None
        seq = lock.max_holder_commit_seq
        lock.holders.discard(holder)
        held = self.by_holder[holder]
        held.discard(target)
        if not held:
            del self.by_holder[holder]
        if target.kind == "key":
            k = (holder, target.table, self.page(target.a))
            self._keys_in_page[k] -= 1
            if not self._keys_in_page[k]:
                del self._keys_in_page[k]
        elif target.kind == "page":
            k = (holder, target.table)
            self._pages[k] -= 1
            if not self._pages[k]:
                del self._pages[k]
        elif target.kind == "range":
            k = (holder, target.table)
            self._ranges_held[k] -= 1
            if not self._ranges_held[k]:
                del self._ranges_held[k]
        if not lock.holders:
            del self.locks[target]
            if target.kind == "range":
                self.ranges[target.table].discard(target)
        return seq

    # -- promotion

    def _promote(self, holder: int, coarse: LockTarget, fine: Iterable[LockTarget]) -> None:
        fine = list(fine)
        seq = None
        for t in fine:
            s = self.locks[t].max_holder_commit_seq if holder == DUMMY else None
            if s is not None and (seq is None or s > seq):
                seq = s
        self._add(holder, coarse, seq if holder == DUMMY else None)
        for t in fine:
            self._remove(holder, t)
        self.promotions += 1
        if coarse.kind == "page":
            self._check_relation(holder, coarse.table)

    def _finer_in_table(self, holder: int, table: str) -> List[LockTarget]:
        return [t for t in self.by_holder.get(holder, ())
                if t.table == table and t.kind != "relation"]

    def _check_relation(self, holder: int, table: str) -> None:
        limit = self.policy.max_pages_per_relation
        if (self._pages.get((holder, table), 0) > limit
                or self._ranges_held.get((holder, table), 0) > limit):
            self._promote(holder, LockTarget.relation(table),
                          self._finer_in_table(holder, table))

    def _check_page(self, holder: int, table: str, page_no: int) -> None:
        if self._keys_in_page.get((holder, table, page_no), 0) > self.policy.max_keys_per_page:
            fine = [t for t in self.by_holder[holder]
                    if t.kind == "key" and t.table == table and self.page(t.a) == page_no]
            self._promote(holder, LockTarget.page(table, page_no), fine)

    def force_promote(self, holder: int) -> bool:
        """Coarsen ``holder``'s locks one step to free lock-table entries."""
        before = len(self.locks)
        groups = [(n, k) for k, n in self._keys_in_page.items() if k[0] == holder and n > 1]
        if groups:
            _, (_, table, page_no) = max(groups)
            fine = [t for t in self.by_holder[holder]
                    if t.kind == "key" and t.table == table and self.page(t.a) == page_no]
            self._promote(holder, LockTarget.page(table, page_no), fine)
        else:
            per_table: Dict[str, int] = defaultdict(int)
            for t in self.by_holder.get(holder, ()):
                if t.kind != "relation":
                    per_table[t.table] += 1
            candidates = [(n, tbl) for tbl, n in per_table.items() if n > 1]
            if not candidates:
                return False
            _, table = max(candidates)
            self._promote(holder, LockTarget.relation(table), self._finer_in_table(holder, table))
        return len(self.locks) < before

    # -- public operations

    def acquire(self, holder: int, target: LockTarget, seq: Optional[int] = None,
                enforce_capacity: bool = True) -> None:
        """Add ``holder`` to ``target`` unless a coarser held lock covers it."""
        if self.covered(holder, target):
            if seq is not None:
                self._bump_covering(holder, target, seq)
            return
        self._add(holder, target, seq)
        if target.kind == "key":
            self._check_page(holder, target.table, self.page(target.a))
        elif target.kind == "page" or target.kind == "range":
            self._check_relation(holder, target.table)
        if enforce_capacity and len(self.locks) > self.policy.max_total_locks:
            self._make_room(holder)

    def _bump_covering(self, holder, target, seq):
        for t in (target, LockTarget.relation(target.table),
                  LockTarget.page(target.table, self.page(target.a)) if target.kind == "key" else None):
            if t is not None and t in self.by_holder.get(holder, ()):
                lock = self.locks[t]
                if lock.max_holder_commit_seq is None or seq > lock.max_holder_commit_seq:
                    lock.max_holder_commit_seq = seq
                return

    def _make_room(self, holder: int) -> None:
        limit = self.policy.max_total_locks
        while len(self.locks) > limit:
            if self.force_promote(holder):
                continue
            if self.make_room is not None and self.make_room():
                continue
            if self.force_promote(DUMMY):
                continue
            heavy = sorted(self.by_holder, key=lambda h: (-len(self.by_holder[h]), h))
            if any(self.force_promote(h) for h in heavy):
                continue
            raise LockTableFull(f"{len(self.locks)} lock entries exceed max_total_locks={limit}")

    def conflicting_readers(self, writer: int, table: str, key: bytes) -> List[Tuple[int, Optional[int]]]:
        """Holders whose locks cover (table, key), checked coarsest to finest.

        Returns ``(holder, max_holder_commit_seq)`` pairs in discovery order;
        the summary dummy appears as holder ``DUMMY``.
        """
        out: List[Tuple[int, Optional[int]]] = []
        seen: Set[int] = {writer}
        targets = [LockTarget.relation(table), LockTarget.page(table, self.page(key)),
                   LockTarget.key(table, key)]
        for t in targets:
            lock = self.locks.get(t)
            if lock is not None:
                self._collect(lock, out, seen)
        for t in sorted(self.ranges.get(table, ())):
            if t.a <= key < t.b:
                self._collect(self.locks[t], out, seen)
        return out

    @staticmethod
    def _collect(lock, out, seen):
        for h in sorted(lock.holders):
            if h == DUMMY:
                out.append((DUMMY, lock.max_holder_commit_seq))
            elif h not in seen:
                seen.add(h)
                out.append((h, None))

    def drop_own_key_lock(self, holder: int, table: str, key: bytes) -> None:
        self._remove(holder, LockTarget.key(table, key))

    def release_holder(self, holder: int) -> None:
        if holder == DUMMY:
            raise ValueError("the summary holder is cleaned per lock, not released")
        for t in list(self.by_holder.get(holder, ())):
            self._remove(holder, t)

    def transfer_to_dummy(self, holder: int, commit_seq: int) -> None:
        """Reassign ``holder``'s locks to the summary holder."""
        for t in list(self.by_holder.get(holder, ())):
            self._remove(holder, t)
            self.acquire(DUMMY, t, seq=commit_seq, enforce_capacity=False)

    def gc_dummy(self, horizon: Optional[int]) -> int:
        """Drop summary locks whose newest holder committed at or before ``horizon``.

        ``horizon=None`` means no transaction is active: drop them all.
        """
        dropped = 0
        for t in list(self.by_holder.get(DUMMY, ())):
            seq = self.locks[t].max_holder_commit_seq
            if horizon is None or seq is None or seq <= horizon:
                self._remove(DUMMY, t)
                dropped += 1
        return dropped

    def targets_of(self, holder: int) -> List[LockTarget]:
        return sorted(self.by_holder.get(holder, ()))

    def clear(self) -> None:
        self.__init__(self.policy, self.make_room)


class S2plLockManager:
    """Blocking shared/exclusive locks for the two-phase locking baseline."""

    def __init__(self, pages_per_table: int = 64):
        self.pages = pages_per_table
        self.read: Dict[LockTarget, Set[int]] = defaultdict(set)
        self.write: Dict[Tuple[str, bytes], int] = {}
        self._write_by_table: Dict[str, Set[bytes]] = defaultdict(set)
        self.by_holder: Dict[int, List[tuple]] = defaultdict(list)

    def _writers_covered(self, target: LockTarget) -> Set[int]:
        keys = self._write_by_table.get(target.table, ())
        return {self.write[(target.table, k)] for k in keys
                if target.covers(target.table, k, self.pages)}

    def acquire_read(self, holder: int, target: LockTarget) -> None:
        if holder in self.read.get(target, ()):
            return
        blockers = self._writers_covered(target) - {holder}
        if blockers:
            raise WouldBlock(blockers, "s2pl-read")
        self.read[target].add(holder)
        self.by_holder[holder].append(("r", target))

    def acquire_write(self, holder: int, table: str, key: bytes) -> None:
        owner = self.write.get((table, key))
        if owner == holder:
            return
        blockers: Set[int] = set()
        if owner is not None:
            blockers.add(owner)
        for t in (LockTarget.relation(table), LockTarget.page(table, page_of(key, self.pages)),
                  LockTarget.key(table, key)):
            blockers |= self.read.get(t, set())
        for t, hs in self.read.items():
            if t.kind == "range" and t.table == table and t.a <= key < t.b:
                blockers |= hs
        blockers.discard(holder)
        if blockers:
            raise WouldBlock(blockers, "s2pl-write")
        self.write[(table, key)] = holder
        self._write_by_table[table].add(key)
        self.by_holder[holder].append(("w", (table, key)))

    def release(self, holder: int) -> None:
        for kind, t in self.by_holder.pop(holder, ()):
            if kind == "r":
                hs = self.read.get(t)
                if hs is not None:
                    hs.discard(holder)
                    if not hs:
                        del self.read[t]
            else:
                if self.write.get(t) == holder:
                    del self.write[t]
                    self._write_by_table[t[0]].discard(t[1])

    def __len__(self):
        return len(self.read) + len(self.write)
