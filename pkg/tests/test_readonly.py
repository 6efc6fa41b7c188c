import threading
import time

import pytest

from conftest import seed_rows
from txnlab import DeferrableTimeout, Engine
from txnlab.errors import WouldBlock
from txnlab.readonly import ReadOnlyOptimizer, Verdict


def test_no_concurrent_writers_means_safe_immediately():
    opt = ReadOnlyOptimizer()
    assert opt.watch(1, 5, []).verdict is Verdict.SAFE


def test_snapshot_unsafe_when_writer_commits_with_early_out_conflict():
    opt = ReadOnlyOptimizer()
    w = opt.watch(10, snapshot_seq=5, concurrent_rw=[7, 8])
    assert opt.on_rw_resolution(7, earliest_out_commit=6) == []
    assert w.verdict is Verdict.PENDING
    assert opt.on_rw_resolution(8, earliest_out_commit=5) == [w]
    assert w.verdict is Verdict.UNSAFE and w.spoiled_by == 8


def test_snapshot_safe_once_every_writer_finished_cleanly():
    opt = ReadOnlyOptimizer()
    w = opt.watch(10, snapshot_seq=5, concurrent_rw=[7, 8])
    opt.on_rw_resolution(7, earliest_out_commit=3, committed=False)  # aborts never spoil
    opt.on_rw_resolution(8, earliest_out_commit=None)
    assert w.verdict is Verdict.SAFE
    assert not opt.watches


def test_read_only_with_no_writers_takes_no_siread_locks(engine):
    seed_rows(engine, "t", {"a": "1", "b": "2"})
    t = engine.begin("ssi", read_only=True)
    engine.scan(t, "t", "a", "z")
    engine.read(t, "t", "a")
    assert t.safe
    assert len(engine.siread) == 0
    assert engine.node(t) is None


def test_read_only_becomes_safe_and_drops_locks(engine):
    seed_rows(engine, "t", {"a": "1"})
    w = engine.begin("ssi")
    engine.write(w, "t", "b", "x")
    ro = engine.begin("ssi", read_only=True)
    engine.read(ro, "t", "a")
    assert not ro.safe and engine.siread.targets_of(ro.id)
    engine.commit(w)
    assert ro.safe
    assert engine.siread.targets_of(ro.id) == []
    assert engine.node(ro) is None


def test_deferrable_waits_for_safe_snapshot_deterministically(engine):
    seed_rows(engine, "t", {"a": "1"})
    w = engine.begin("ssi")
    engine.write(w, "t", "a", "2")
    d = engine.begin("ssi", read_only=True, deferrable=True)
    with pytest.raises(WouldBlock):
        engine.wait_safe(d)
    engine.commit(w)
    engine.wait_safe(d)
    assert d.safe and d.snapshot_attempts == 1
    assert engine.read(d, "t", "a") == b"1"


def unsafe_round(engine):
    """Make the pending snapshot of a deferrable transaction unsafe once."""
    pivot = engine.begin("ssi")
    engine.read(pivot, "t", "x")
    t3 = engine.begin("ssi")
    engine.write(t3, "t", "x", "1")
    engine.commit(t3)
    return pivot


def engine_write_commit(e, txn):
    e.write(txn, "t", "y", "1")
    e.commit(txn)


def test_deferrable_retakes_snapshot_after_unsafe_verdict():
    e = Engine(deterministic=True)
    seed_rows(e, "t", {"x": "0", "y": "0"})
    pivot = unsafe_round(e)
    d = e.begin("ssi", read_only=True, deferrable=True)
    engine_write_commit(e, pivot)  # pivot commits with an out-conflict to a pre-snapshot commit
    e.wait_safe(d)
    assert d.safe and d.snapshot_attempts == 2


def test_deferrable_gives_up_after_iteration_cap():
    e = Engine(deterministic=True, deferrable_max_iterations=1)
    seed_rows(e, "t", {"x": "0", "y": "0"})
    pivot = unsafe_round(e)
    d = e.begin("ssi", read_only=True, deferrable=True)
    engine_write_commit(e, pivot)
    with pytest.raises(DeferrableTimeout):
        e.wait_safe(d)


def test_deferrable_times_out_in_threaded_mode():
    e = Engine()
    w = e.begin("ssi")
    e.write(w, "t", "a", "1")
    started = time.monotonic()
    with pytest.raises(DeferrableTimeout):
        e.begin("ssi", read_only=True, deferrable=True, timeout=0.05)
    assert time.monotonic() - started < 2
    e.commit(w)


def test_deferrable_unblocks_when_writer_commits_in_threaded_mode():
    e = Engine()
    w = e.begin("ssi")
    e.write(w, "t", "a", "1")
    timer = threading.Timer(0.05, e.commit, args=(w,))
    timer.start()
    d = e.begin("ssi", read_only=True, deferrable=True, timeout=5)
    timer.join()
    assert d.safe
    e.commit(d)
