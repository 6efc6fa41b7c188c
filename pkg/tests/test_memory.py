import pytest

from conftest import seed_rows
from txnlab import Engine, SerializationFailure
from txnlab.memory import NOT_SERIALIZABLE, CommittedRing, SummaryTable


def test_summary_table_eviction_is_pessimistic():
    s = SummaryTable(capacity=1)
    s.put(1, None)
    s.put(2, 7)
    assert s.get(2) == (True, 7)
    assert s.get(1) == (True, 0)
    assert s.get(3) == (False, None)
    assert s.evicted == 1


def test_ring_rejects_zero_capacity():
    with pytest.raises(ValueError):
        CommittedRing(0)


def test_everything_released_when_idle(engine):
    seed_rows(engine, "t", {"a": "0", "b": "0"})
    for i in range(5):
        t = engine.begin("ssi")
        engine.read(t, "t", "a")
        engine.write(t, "t", "b", str(i))
        engine.commit(t)
    stats = engine.stats()
    assert stats["nodes_tracked"] == 0
    assert stats["locks_held"] == 0


def test_committed_node_kept_while_a_concurrent_txn_runs(engine):
    seed_rows(engine, "t", {"a": "0"})
    pinned = engine.begin("ssi")
    engine.read(pinned, "t", "a")
    t = engine.begin("ssi")
    engine.read(t, "t", "a")
    engine.commit(t)
    assert engine.stats()["nodes_tracked"] == 1
    engine.commit(pinned)
    assert engine.stats()["nodes_tracked"] == 0


def test_only_read_only_left_releases_committed_locks(engine):
    seed_rows(engine, "t", {"a": "0"})
    w = engine.begin("ssi")
    engine.read(w, "t", "a")
    ro = engine.begin("ssi", read_only=True)
    engine.read(ro, "t", "a")
    engine.write(w, "t", "b", "1")
    engine.commit(w)
    assert engine.siread.targets_of(w.id) == []


def test_capacity_one_summarizes_and_bounds_tracking():
    e = Engine(deterministic=True, max_committed_tracked=1)
    seed_rows(e, "t", {f"k{i:02d}": "0" for i in range(20)})
    pinned = e.begin("ssi")
    e.read(pinned, "t", "k00")
    ids = []
    for i in range(1, 20):
        t = e.begin("ssi")
        e.read(t, "t", f"k{i:02d}")
        e.write(t, "t", f"w{i:02d}", "x")
        e.commit(t)
        ids.append(t.id)
        assert len(e.governor.ring) <= 1
    assert e.governor.summarized_total == len(ids) - 1
    assert e.governor.summary_lookup(ids[0], True).kind == "summarized"
    assert e.governor.summary_lookup(ids[-1], True).kind == "tracked"
    assert e.governor.summary_lookup(ids[0], False) is NOT_SERIALIZABLE
    e.commit(pinned)
    assert e.stats()["locks_held"] == 0


def test_summarized_writer_still_detected():
    """Write skew where the first committer has been summarized away."""
    e = Engine(deterministic=True, max_committed_tracked=1)
    seed_rows(e, "t", {"x": "0", "y": "0"})
    t1, t2 = e.begin("ssi"), e.begin("ssi")
    e.read(t1, "t", "x")
    e.read(t2, "t", "y")
    e.write(t1, "t", "y", "1")
    e.commit(t1)
    filler = e.begin("ssi")
    e.write(filler, "t", "w", "1")
    e.commit(filler)  # pushes t1 out of the ring
    assert e.graph.get(t1.id) is None
    with pytest.raises(SerializationFailure):
        e.write(t2, "t", "x", "1")
