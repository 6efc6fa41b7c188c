"""Multi-threaded SIBENCH driver and the deferrable-latency probe."""

from __future__ import annotations

import dataclasses
import random
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .engine import Engine, EngineConfig
from .errors import DeferrableTimeout, SerializationFailure, TxnError, WwConflict
from .mvcc import Mode

TABLE = "sibench"


@dataclass
class BenchResult:
    mode: str
    rows: int
    readers: int
    writers: int
    duration_s: float
    committed: int
    aborted_serialization: int
    aborted_ww: int
    aborted_other: int
    throughput_tps: float
    abort_rate: float
    false_positive_rate: Optional[float] = None
    mem_stats: Dict[str, int] = field(default_factory=dict)

    @property
    def attempts(self) -> int:
        return self.committed + self.aborted_serialization + self.aborted_ww + self.aborted_other

    def row(self) -> Dict[str, object]:
        out = dataclasses.asdict(self)
        mem = out.pop("mem_stats")
        out["attempts"] = self.attempts
        out.update({f"mem_{k}": v for k, v in sorted(mem.items())})
        return out


def _key(i: int) -> str:
    return f"r{i:06d}"


def load_table(engine: Engine, rows: int, rng: random.Random) -> None:
    txn = engine.begin(Mode.SI)
    for i in range(rows):
        engine.write(txn, TABLE, _key(i), str(rng.randrange(1_000_000)))
    engine.commit(txn)


def _query(engine: Engine, mode: Mode):
    txn = engine.begin(mode)
    rows = engine.scan(txn, TABLE, _key(0), "s")
    best = min(rows, key=lambda kv: int(kv[1]))[0] if rows else None
    engine.commit(txn)
    return best


def _update(engine: Engine, mode: Mode, rng: random.Random, rows: int) -> None:
    txn = engine.begin(mode)
    key = _key(rng.randrange(rows))
    old = engine.read(txn, TABLE, key)
    engine.write(txn, TABLE, key, str(int(old or 0) + rng.randrange(1, 100)))
    engine.commit(txn)


class _Tally:
    def __init__(self):
        self.lock = threading.Lock()
        self.counts = {"committed": 0, "serialization": 0, "ww": 0, "other": 0}

    def add(self, what: str) -> None:
        with self.lock:
            self.counts[what] += 1


def _classify(err: TxnError) -> str:
    if isinstance(err, SerializationFailure):
        return "serialization"
    if isinstance(err, WwConflict):
        return "ww"
    return "other"


def run_sibench(rows: int = 100, readers: int = 4, writers: int = 4, duration: float = 2.0,
                mode: Mode = Mode.SERIALIZABLE, seed: int = 0, think_time: float = 0.0001,
                config: Optional[EngineConfig] = None) -> BenchResult:
    """Equal-weight update and full-scan query workers against one table.

    ``think_time`` is slept between transactions; without it the interpreter's
    lock hands the engine to the same few threads and the others starve.
    """
    if rows < 1:
        raise ValueError("rows must be at least 1")
    config = dataclasses.replace(config or EngineConfig(), deterministic=False,
                                 record_history=False, track_flags=False)
    engine = Engine(config)
    load_table(engine, rows, random.Random(seed))
    tally = _Tally()
    stop = threading.Event()

    def worker(idx: int, is_reader: bool) -> None:
        rng = random.Random(seed * 1000 + idx)
        while not stop.is_set():
            try:
                if is_reader:
                    _query(engine, mode)
                else:
                    _update(engine, mode, rng, rows)
                tally.add("committed")
            except TxnError as err:
                tally.add(_classify(err))
            if think_time:
                time.sleep(think_time)

    threads = [threading.Thread(target=worker, args=(i, i < readers), daemon=True)
               for i in range(readers + writers)]
    started = time.perf_counter()
    for t in threads:
        t.start()
    time.sleep(duration)
    stop.set()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - started
    c = tally.counts
    attempts = sum(c.values())
    stats = engine.stats()
    return BenchResult(
        mode=mode.value, rows=rows, readers=readers, writers=writers,
        duration_s=round(elapsed, 3), committed=c["committed"],
        aborted_serialization=c["serialization"], aborted_ww=c["ww"], aborted_other=c["other"],
        throughput_tps=round(c["committed"] / elapsed, 1),
        abort_rate=round((attempts - c["committed"]) / attempts, 4) if attempts else 0.0,
        mem_stats={k: stats[k] for k in ("peak_nodes_tracked", "peak_locks_held",
                                         "summarized_total", "cleanup_runs")},
    )


@dataclass
class DeferrableResult:
    samples: int
    timeouts: int
    latencies_s: List[float]
    iterations: List[int]
    load_writers: int
    timeout_s: float

    @property
    def timeout_rate(self) -> float:
        return self.timeouts / self.samples if self.samples else 0.0

    def summary(self) -> Dict[str, object]:
        lat = sorted(self.latencies_s)
        out: Dict[str, object] = {"samples": self.samples, "timeouts": self.timeouts,
                                  "timeout_rate": round(self.timeout_rate, 4),
                                  "load_writers": self.load_writers, "timeout_s": self.timeout_s}
        if lat:
            p90 = lat[min(len(lat) - 1, int(0.9 * len(lat)))]
            out.update(median_s=round(statistics.median(lat), 6), p90_s=round(p90, 6),
                       max_s=round(lat[-1], 6),
                       mean_iterations=round(statistics.mean(self.iterations), 3))
        return out


def run_deferrable_probe(load_writers: int = 8, samples: int = 20, timeout: float = 30.0,
                         seed: int = 0, n_keys: int = 64, think_time: float = 0.0005,
                         config: Optional[EngineConfig] = None) -> DeferrableResult:
    """Open deferrable read-only transactions one after another while
    serializable read/write transactions hammer a shared key set."""
    config = dataclasses.replace(config or EngineConfig(), deterministic=False,
                                 record_history=False, track_flags=False,
                                 deferrable_timeout=timeout)
    engine = Engine(config)
    keys = [f"k{i:03d}" for i in range(n_keys)]
    weights = [1.0 / (r + 1) ** 1.2 for r in range(n_keys)]
    stop = threading.Event()

    def writer(idx: int) -> None:
        rng = random.Random(seed * 1000 + idx)
        while not stop.is_set():
            try:
                txn = engine.begin(Mode.SERIALIZABLE)
                for _ in range(rng.randint(1, 4)):
                    k = rng.choices(keys, weights)[0]
                    if rng.random() < 0.5:
                        engine.read(txn, "t", k)
                    else:
                        engine.write(txn, "t", k, str(rng.randrange(1000)))
                    if think_time:
                        time.sleep(think_time)
                engine.commit(txn)
            except TxnError:
                pass

    threads = [threading.Thread(target=writer, args=(i,), daemon=True) for i in range(load_writers)]
    for t in threads:
        t.start()
    latencies: List[float] = []
    iterations: List[int] = []
    timeouts = 0
    try:
        for _ in range(samples):
            started = time.perf_counter()
            try:
                txn = engine.begin(Mode.SERIALIZABLE, read_only=True, deferrable=True, timeout=timeout)
            except DeferrableTimeout:
                timeouts += 1
                continue
            latencies.append(time.perf_counter() - started)
            iterations.append(txn.snapshot_attempts)
            engine.scan(txn, "t", keys[0], "l")
            engine.commit(txn)
    finally:
        stop.set()
        for t in threads:
            t.join()
    return DeferrableResult(samples, timeouts, latencies, iterations, load_writers, timeout)
