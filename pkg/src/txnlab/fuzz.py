"""Randomized multi-session workloads checked against the oracle."""

from __future__ import annotations

import dataclasses
import itertools
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional

from .engine import Engine, EngineConfig
from .mvcc import Mode, Status
from .oracle import FALSE_POSITIVE, Oracle
from .schedule import Executor, Outcome, ScheduleStuck, Step


class AnomalyFound(AssertionError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class FuzzConfig:
    n_txns: int = 2000
    n_keys: int = 64
    n_sessions: int = 6
    min_stmts: int = 1
    max_stmts: int = 6
    scan_frac: float = 0.25
    write_frac: float = 0.45
    delete_frac: float = 0.05
    scan_width: int = 12
    read_only_frac: float = 0.15
    deferrable_frac: float = 0.0
    zipf_s: float = 1.2
    tables: int = 2
    prepare_frac: float = 0.0
    crash_prob: float = 0.0
    retry_attempts: int = 25
    engine: Dict[str, object] = field(default_factory=dict)


PRESETS = {
    "default": FuzzConfig(),
    "capacity1": FuzzConfig(engine={"max_committed_tracked": 1}),
    "recovery": FuzzConfig(prepare_frac=0.2, crash_prob=0.004),
}


def preset(name: str, **overrides) -> FuzzConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown fuzz preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


@dataclass
class _Sess:
    name: str
    program: Deque[Step] = field(default_factory=deque)
    body: List[Step] = field(default_factory=list)  # statements, for retries
    read_only: bool = False
    waiting: Optional[Outcome] = None
    retry: Optional[dict] = None


class Fuzzer:
    def __init__(self, seed: int, mode: Mode = Mode.SERIALIZABLE, config: Optional[FuzzConfig] = None):
        self.seed = seed
        self.mode = mode
        self.cfg = config or FuzzConfig()
        self.rng = random.Random(seed)
        ecfg = EngineConfig(deterministic=True, record_history=True, track_flags=True)
        self.engine = Engine(dataclasses.replace(ecfg, **self.cfg.engine))
        self.ex = Executor(self.engine, mode)
        self.keys = [f"k{i:03d}" for i in range(self.cfg.n_keys)]
        weights = [1.0 / (r + 1) ** self.cfg.zipf_s for r in range(self.cfg.n_keys)]
        self.cum = list(itertools.accumulate(weights))
        self.tables = [f"t{i}" for i in range(self.cfg.tables)]
        self.sessions = [_Sess(f"S{i + 1}") for i in range(self.cfg.n_sessions)]
        self.generated = 0
        self.gids = itertools.count(1)
        self.values = itertools.count(1)
        self.counts: Counter = Counter()
        self.retry_violations: List[dict] = []
        self.crashes = 0

    # -- workload generation

    def _key(self) -> str:
        return self.rng.choices(self.keys, cum_weights=self.cum)[0]

    def _statements(self, read_only: bool) -> List[Step]:
        cfg, rng = self.cfg, self.rng
        out = []
        for _ in range(rng.randint(cfg.min_stmts, cfg.max_stmts)):
            table = rng.choice(self.tables)
            r = rng.random()
            if r < cfg.scan_frac:
                i = self.keys.index(self._key())
                j = min(len(self.keys), i + rng.randint(1, cfg.scan_width))
                hi = self.keys[j] if j < len(self.keys) else "l"
                out.append(("SCAN", (table, self.keys[i], hi)))
            elif read_only or r < cfg.scan_frac + (1 - cfg.scan_frac) * (1 - cfg.write_frac):
                out.append(("GET", (table, self._key())))
            elif rng.random() < cfg.delete_frac / cfg.write_frac:
                out.append(("DEL", (table, self._key())))
            else:
                out.append(("PUT", (table, self._key(), None)))
        return out

    def _new_txn(self, s: _Sess) -> None:
        cfg, rng = self.cfg, self.rng
        ro = rng.random() < cfg.read_only_frac
        opts = ()
        if ro:
            opts = ("RO", "DEFERRABLE") if rng.random() < cfg.deferrable_frac else ("RO",)
        s.read_only = ro
        s.body = self._statements(ro)
        prepare = not ro and rng.random() < cfg.prepare_frac
        self._load(s, opts, prepare)
        self.generated += 1

    def _load(self, s: _Sess, opts, prepare: bool) -> None:
        prog = [self._step(s, "BEGIN", opts)]
        for verb, args in s.body:
            if verb == "PUT":
                args = (args[0], args[1], f"v{next(self.values)}")
            prog.append(self._step(s, verb, args))
        if prepare:
            gid = f"g{next(self.gids)}"
            prog += [self._step(s, "PREPARE", (gid,)), self._step(s, "COMMIT_PREPARED", (gid,))]
        else:
            prog.append(self._step(s, "COMMIT", ()))
        s.program = deque(prog)

    @staticmethod
    def _step(s: _Sess, verb: str, args) -> Step:
        text = " ".join((s.name, verb.replace("_", " ")) + tuple(args))
        return Step(0, verb, s.name, tuple(args), text)

    # -- driving

    def run(self) -> dict:
        while True:
            if self.cfg.crash_prob and self.rng.random() < self.cfg.crash_prob:
                self.ex.crash()
                self.crashes += 1
                self.ex.settle()
                self._collect()
            ready = [s for s in self.sessions if self._ready(s)]
            if not ready:
                if any(s.program or s.waiting or s.retry for s in self.sessions):
                    if any(s.retry and not s.program and not s.waiting for s in self.sessions):
                        # only parked retries left and their partners never finish
                        raise ScheduleStuck("retries waiting on partners that cannot finish")
                    raise ScheduleStuck("every session is blocked")
                break
            s = self.rng.choice(ready)
            if not s.program:
                if s.retry is not None and self._partners_done(s.retry):
                    self._run_retry(s)
                    continue
                self._new_txn(s)
            s.waiting = self.ex.submit(s.program.popleft())
            self.ex.settle()
            self._collect()
        return self.report()

    def _ready(self, s: _Sess) -> bool:
        if self.ex.blocked(s.name):
            return False
        if s.program:
            return True
        if s.retry is not None:
            return self._partners_done(s.retry)
        return self.generated < self.cfg.n_txns

    def _partners_done(self, retry: dict) -> bool:
        clog = self.engine.clog
        return all(clog[p].status in (Status.COMMITTED, Status.ABORTED) for p in retry["partners"])

    def _collect(self) -> None:
        """Account for every statement that finished since the last look."""
        for s in self.sessions:
            out = s.waiting
            if out is None or out.code == "BLOCKED":
                continue
            s.waiting = None
            if out.code == "OK":
                if out.text.split()[1] == "PREPARE":
                    self.counts["prepared"] += 1
                continue
            self.counts[f"abort_{out.code.lower()}"] += 1
            s.program.clear()
            if out.code == "SERIALIZATION_FAILURE" and s.retry is None:
                exc = out.exc
                partners = {p for p in (exc.structure or ()) if p is not None and p != out.txn}
                # everything still running at abort time must finish before the rerun
                partners |= set(self.engine.txns) - {out.txn}
                s.retry = {"body": list(s.body), "read_only": s.read_only, "partners": partners,
                           "victim": out.txn, "attempts": 0, "horizon": self.engine._next_id}

    def _run_retry(self, s: _Sess) -> None:
        """Re-run a victim with no other session interleaved."""
        retry = s.retry
        retry["attempts"] += 1
        s.body = retry["body"]
        self._load(s, ("RO",) if retry["read_only"] else (), False)
        while s.program:
            out = self.ex.submit(s.program.popleft())
            if out.code == "BLOCKED":
                self.ex.cancel(s.name)
                s.program.clear()
                self.ex.settle()
                self.counts["retry_deferred"] += 1
                if retry["attempts"] >= self.cfg.retry_attempts:
                    self.counts["retry_abandoned"] += 1
                    s.retry = None
                return
            if out.code != "OK":
                s.program.clear()
                self.counts["retry_failed"] += 1
                if out.code == "SERIALIZATION_FAILURE":
                    self.counts["retry_serialization_failed"] += 1
                exc = out.exc
                newcomers = [t for t in (exc.structure or ()) if t is not None and t != out.txn
                             and t >= retry["horizon"]] if exc is not None else []
                if (out.code == "SERIALIZATION_FAILURE" and not exc.prepared_partner
                        and not newcomers):
                    self.retry_violations.append({"victim": retry["victim"], "retry": out.txn,
                                                  "structure": exc.structure})
                break
        else:
            self.counts["retry_committed"] += 1
        self.ex.settle()
        s.retry = None

    # -- verdict

    def report(self) -> dict:
        eng = self.engine
        oracle = Oracle(eng.history)
        cycle, _ = oracle.cycle()
        aborts = oracle.serialization_aborts()
        fps = sum(1 for t in aborts if oracle.classify_abort(t) == FALSE_POSITIVE)
        missed = set()
        if self.mode is Mode.SERIALIZABLE:
            summary = eng.governor.summary
            exempt = {t.id for t in self.ex.handles if t.safe}
            exempt |= set(summary.entries) | summary._evicted_ids
            missed = oracle.missed_flags(eng.graph.flag_log, exempt)
        attempts = len(self.ex.handles)
        committed = sum(1 for t in self.ex.handles if t.status is Status.COMMITTED)
        stats = eng.stats()
        return {
            "seed": self.seed,
            "mode": self.mode.value,
            "txns": attempts,
            "committed": committed,
            "aborted_serialization": self.counts["abort_serialization_failure"],
            "aborted_ww": self.counts["abort_ww_conflict"],
            "aborted_deadlock": self.counts["abort_deadlock"],
            "aborted_other": attempts - committed - self.counts["abort_serialization_failure"]
            - self.counts["abort_ww_conflict"] - self.counts["abort_deadlock"],
            "abort_rate": round((attempts - committed) / attempts, 6) if attempts else 0.0,
            "false_positives": fps,
            "false_positive_rate": round(fps / len(aborts), 6) if aborts else 0.0,
            "cycle": cycle,
            "missed_flags": sorted(missed),
            "retries": self.counts["retry_committed"] + self.counts["retry_failed"],
            "retry_failed": self.counts["retry_failed"],
            "retry_deferred": self.counts["retry_deferred"],
            "retry_violations": self.retry_violations,
            "crashes": self.crashes,
            "peak_nodes_tracked": stats["peak_nodes_tracked"],
            "peak_locks_held": stats["peak_locks_held"],
            "summarized_total": stats["summarized_total"],
            "cleanup_runs": stats["cleanup_runs"],
        }


def fuzz(seed: int, mode: Mode = Mode.SERIALIZABLE, config: Optional[FuzzConfig] = None,
         strict: bool = True) -> dict:
    """Run one fuzz campaign; in SERIALIZABLE mode a committed cycle raises AnomalyFound."""
    report = Fuzzer(seed, mode, config).run()
    if strict and mode is Mode.SERIALIZABLE and report["cycle"]:
        raise AnomalyFound(f"seed {seed}: committed cycle {report['cycle']}", report)
    return report
