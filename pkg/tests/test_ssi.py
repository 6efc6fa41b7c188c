from types import SimpleNamespace

import pytest
from hypothesis import given, strategies as st

from conftest import seed_rows
from txnlab import Engine, SerializationFailure, Status, TxnNotActive
from txnlab.errors import Unresolvable
from txnlab.locks import LockTarget
from txnlab.mvcc import Mode
from txnlab.ssi import WILDCARD_IN, ConflictGraph, Pseudo, SerializableNode


def node(graph, txid, snap=0, read_only=False, wrote=True):
    txn = SimpleNamespace(id=txid, read_only=read_only, status=Status.ACTIVE,
                          wrote=wrote)
    n = SerializableNode(txn, snap)
    graph.add(n)
    return n


def commit(n, seq):
    n.commit_seq = seq
    n.txn.status = Status.COMMITTED


def write_skew(engine, mode):
    seed_rows(engine, "oncall", {"alice": "on", "bob": "on"})
    t1, t2 = engine.begin(mode), engine.begin(mode)
    engine.scan(t1, "oncall", "a", "z")
    engine.scan(t2, "oncall", "a", "z")
    engine.write(t1, "oncall", "alice", "off")
    engine.write(t2, "oncall", "bob", "off")
    return t1, t2


def test_write_skew_commits_under_si(engine):
    t1, t2 = write_skew(engine, "si")
    engine.commit(t1)
    engine.commit(t2)
    assert set(engine.snapshot_table("oncall").values()) == {b"off"}


def test_write_skew_aborts_exactly_one_under_ssi(engine):
    t1, t2 = write_skew(engine, "ssi")
    engine.commit(t1)
    with pytest.raises(SerializationFailure) as info:
        engine.commit(t2)
    assert info.value.structure is not None
    assert t2.status is Status.ABORTED
    retry = engine.begin("ssi")
    engine.scan(retry, "oncall", "a", "z")
    engine.write(retry, "oncall", "bob", "off")
    engine.commit(retry)


def test_rw_edges_point_from_reader_to_writer(engine):
    seed_rows(engine, "t", {"x": "0"})
    r, w = engine.begin("ssi"), engine.begin("ssi")
    engine.read(r, "t", "x")
    engine.write(w, "t", "x", "1")
    assert w.id in engine.node(r).out_conflicts
    assert r.id in engine.node(w).in_conflicts
    assert (r.id, w.id) in engine.graph.flag_log


def test_read_after_concurrent_commit_is_flagged_through_mvcc(engine):
    seed_rows(engine, "t", {"x": "0"})
    r, w = engine.begin("ssi"), engine.begin("ssi")
    engine.write(w, "t", "x", "1")
    engine.commit(w)
    assert engine.read(r, "t", "x") == b"0"
    assert (r.id, w.id) in engine.graph.flag_log


def test_own_write_drops_own_siread_lock(engine):
    seed_rows(engine, "t", {"x": "0"})
    t = engine.begin("ssi")
    engine.read(t, "t", "x")
    assert engine.siread.holds(t.id, LockTarget.key("t", b"x"))
    engine.write(t, "t", "x", "1")
    assert not engine.siread.holds(t.id, LockTarget.key("t", b"x"))


def test_structure_left_alone_unless_writer_commits_first(engine):
    # t1 -> t2 -> t3 with t3 committing last cannot close a cycle
    seed_rows(engine, "t", {"a": "0", "b": "0"})
    t1, t2, t3 = (engine.begin("ssi") for _ in range(3))
    engine.read(t1, "t", "a")
    engine.write(t2, "t", "a", "1")
    engine.read(t2, "t", "b")
    engine.write(t3, "t", "b", "1")
    engine.commit(t1)
    engine.commit(t2)
    engine.commit(t3)


def test_actionable_requires_writer_to_commit_first():
    g = ConflictGraph()
    t1, t2, t3 = node(g, 1), node(g, 2), node(g, 3)
    assert not g.actionable(t1, t2, t3)
    commit(t3, 5)
    assert g.actionable(t1, t2, t3)
    commit(t2, 4)
    assert not g.actionable(t1, t2, t3)


def test_actionable_read_only_rule():
    g = ConflictGraph()
    t1 = node(g, 1, snap=4, read_only=True, wrote=False)
    t2, t3 = node(g, 2), node(g, 3)
    commit(t3, 5)
    assert not g.actionable(t1, t2, t3)  # t3 committed after t1's snapshot
    t1.snapshot_seq = 5
    assert g.actionable(t1, t2, t3)


def test_victim_prefers_pivot_then_reader():
    g = ConflictGraph()
    t1, t2, t3 = node(g, 1), node(g, 2), node(g, 3)
    commit(t3, 5)
    assert g.select_victim(t1, t2, t3, caller=t1).node is t2
    commit(t2, 6)
    assert g.select_victim(t1, t2, t3, caller=t3).node is t1


def test_victim_is_committer_when_it_closes_the_structure():
    g = ConflictGraph()
    t1, t2, t3 = node(g, 1), node(g, 2), node(g, 3)
    t2.prepared = True
    v = g.select_victim(t1, t2, t3, caller=t3, committing=t3)
    assert v.node is t3 and v.prepared_partner


def test_prepared_members_are_never_chosen():
    g = ConflictGraph()
    t1, t2, t3 = node(g, 1), node(g, 2), node(g, 3)
    t1.prepared = t2.prepared = True
    commit(t3, 3)
    with pytest.raises(Unresolvable):
        g.select_victim(t1, t2, t3, caller=None)


def test_precommit_skips_structures_with_no_one_else_to_abort():
    g = ConflictGraph()
    pivot = node(g, 2)
    pivot.prepared = True
    pivot.conservative_in = True
    pivot.conservative_out = True
    assert list(g.in_sources(pivot)) == [WILDCARD_IN]
    assert Pseudo(0, "recovered-writer") in list(g.out_targets(pivot))
    assert g.precommit(pivot, pending=9, allow_self=False) is None
    with pytest.raises(Unresolvable):
        g.precommit(pivot, pending=9, allow_self=True)


def test_remove_drops_all_incident_edges():
    g = ConflictGraph()
    a, b, c = node(g, 1), node(g, 2), node(g, 3)
    g.flag(a, b)
    g.flag(b, c)
    g.remove(b)
    assert not a.out_conflicts and not c.in_conflicts
    assert 2 not in g.nodes


def test_flag_is_idempotent_and_symmetric():
    g = ConflictGraph()
    a, b = node(g, 1), node(g, 2)
    assert g.flag(a, b)
    assert not g.flag(a, b)
    assert b.id in a.out_conflicts and a.id in b.in_conflicts


@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), max_size=25),
       st.sets(st.integers(1, 6)))
def test_edge_lists_stay_symmetric(edges, removed):
    g = ConflictGraph()
    nodes = {i: node(g, i) for i in range(1, 7)}
    for a, b in edges:
        if a != b:
            g.flag(nodes[a], nodes[b])
    for r in removed:
        g.remove(nodes[r])
    for n in g.nodes.values():
        for o in n.out_conflicts:
            assert n.id in g.nodes[o].in_conflicts
        for i in n.in_conflicts:
            assert n.id in g.nodes[i].out_conflicts


def test_si_transactions_take_no_siread_locks(engine):
    seed_rows(engine, "t", {"x": "0"})
    t = engine.begin("si")
    engine.read(t, "t", "x")
    engine.scan(t, "t", "a", "z")
    assert engine.node(t) is None
    assert len(engine.siread) == 0


def test_doomed_partner_sees_error_on_next_operation(engine):
    # t3's commit closes t1 -> pivot -> t3; the pivot is aborted on the spot
    seed_rows(engine, "t", {"a": "0", "b": "0"})
    t1, pivot, t3 = (engine.begin("ssi") for _ in range(3))
    engine.read(t1, "t", "a")
    engine.write(pivot, "t", "a", "1")
    engine.read(pivot, "t", "b")
    engine.write(t3, "t", "b", "1")
    engine.commit(t3)
    assert pivot.status is Status.ABORTED
    with pytest.raises(SerializationFailure):
        engine.read(pivot, "t", "a")
    with pytest.raises(TxnNotActive):
        engine.abort(pivot)
    engine.commit(t1)


def test_mixed_mode_si_reader_is_invisible_to_ssi():
    e = Engine(deterministic=True)
    seed_rows(e, "t", {"x": "0"})
    si = e.begin(Mode.SI)
    ssi = e.begin(Mode.SERIALIZABLE)
    e.read(si, "t", "x")
    e.write(ssi, "t", "x", "1")
    assert not e.node(ssi).in_conflicts
