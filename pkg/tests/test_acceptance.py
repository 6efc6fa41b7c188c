"""Acceptance gate. One test per criterion; a summary line per criterion is
printed at the end of the run (see conftest.py)."""

import io
import os
import time
import warnings

import pytest

from conftest import seed_rows
from txnlab import Engine, SerializationFailure, Status
from txnlab.bench import run_deferrable_probe, run_sibench
from txnlab.cli import main, write_csv
from txnlab.fuzz import PRESETS, fuzz, preset
from txnlab.mvcc import Mode
from txnlab.oracle import Oracle
from txnlab.schedule import load, run_schedule
from txnlab.twophase import FILENAME

SEEDS = range(50)
RESULTS = os.path.join(os.path.dirname(__file__), "..", "results")


def scenario(name, mode):
    started = time.monotonic()
    _, steps = load(name)
    res = run_schedule(steps, mode, name, strict=True)
    return res, time.monotonic() - started


def statuses(res, *sessions):
    ex = {o.session: o for o in res.outcomes}
    return [res.engine.clog[ex[s].txn].status if s in ex else None for s in sessions]


def session_txn(res, session):
    return next(o.txn for o in res.outcomes if o.session == session and o.txn is not None)


def test_c01_anomaly_reproduction(record_property):
    res, dt = scenario("fig1", Mode.SI)
    assert res.passed
    assert [res.engine.clog[session_txn(res, s)].status for s in ("S1", "S2")] == [Status.COMMITTED] * 2
    assert set(res.engine.snapshot_table("doctors").values()) == {b"off"}
    assert Oracle(res.engine.history).cycle()[0]
    res2, dt2 = scenario("fig1", Mode.SERIALIZABLE)
    assert res2.passed
    done = [res2.engine.clog[session_txn(res2, s)].status for s in ("S1", "S2")]
    assert sorted(s.value for s in done) == sorted([Status.COMMITTED.value, Status.ABORTED.value])
    assert [o.code for o in res2.outcomes].count("SERIALIZATION_FAILURE") == 1
    assert dt < 1 and dt2 < 1
    assert main(["scenario", "fig1", "--mode", "si"], io.StringIO()) == 0
    assert main(["scenario", "fig1", "--mode", "ssi"], io.StringIO()) == 0
    record_property("detail", f"si {dt * 1000:.0f} ms, ssi {dt2 * 1000:.0f} ms")


def test_c02_three_transaction_anomaly(record_property):
    res, dt = scenario("fig2", Mode.SI)
    assert res.passed
    assert all(res.engine.clog[session_txn(res, s)].status is Status.COMMITTED for s in ("S1", "S2", "S3"))
    report = next(o for o in res.outcomes if o.session == "S1" and o.text.startswith("S1 SCAN"))
    assert [k for k, _ in report.value] == [b"1:r0"]  # receipt r1 missing from batch 1
    assert b"1:r1" in res.engine.snapshot_table("receipts")
    res2, dt2 = scenario("fig2", Mode.SERIALIZABLE)
    assert res2.passed
    aborted = [s for s in ("S1", "S2", "S3")
               if res2.engine.clog[session_txn(res2, s)].status is Status.ABORTED]
    assert aborted in (["S1"], ["S2"])  # REPORT or NEW-RECEIPT, never CLOSE-BATCH
    assert not Oracle(res2.engine.history).cycle()[0]
    assert dt < 1 and dt2 < 1
    record_property("detail", f"ssi victim {aborted[0]}")


def test_c03_permissiveness(record_property):
    res, dt = scenario("fig2-no-t1", Mode.SERIALIZABLE)
    assert res.passed
    assert all(res.engine.clog[session_txn(res, s)].status is Status.COMMITTED for s in ("S2", "S3"))
    assert not any(o.code == "SERIALIZATION_FAILURE" or o.blocked_at is not None for o in res.outcomes)
    res2, dt2 = scenario("fig2-no-t1", Mode.S2PL)
    assert res2.passed
    hindered = [o.code for o in res2.outcomes if o.code in ("DEADLOCK", "SERIALIZATION_FAILURE")]
    hindered += ["BLOCKED" for o in res2.outcomes if o.blocked_at is not None]
    assert hindered
    assert dt < 1 and dt2 < 1
    record_property("detail", f"s2pl saw {sorted(set(hindered))}")


def test_c04_read_only_rule(record_property):
    for mode in (Mode.SI, Mode.SERIALIZABLE):
        res, _ = scenario("readonly-rule", mode)
        assert res.passed
        assert not Oracle(res.engine.history).cycle()[0] or mode is Mode.SI
    res, _ = scenario("readonly-rule", Mode.SERIALIZABLE)
    st = {s: res.engine.clog[session_txn(res, s)].status for s in ("S1", "S2", "S3", "S4", "S5", "S6")}
    assert st["S1"] is st["S2"] is st["S3"] is Status.COMMITTED  # (a) no abort
    assert st["S5"] is Status.ABORTED  # (b) snapshot after T3 commit
    assert st["S4"] is st["S6"] is Status.COMMITTED
    oracle = Oracle(res.engine.history)
    assert not oracle.cycle()[0]
    record_property("detail", "(a) no abort, (b) one abort, both acyclic")


@pytest.fixture(scope="module")
def ssi_campaign():
    started = time.monotonic()
    reports = {name: [fuzz(seed, Mode.SERIALIZABLE, preset(name), strict=False) for seed in SEEDS]
               for name in sorted(PRESETS)}
    return reports, time.monotonic() - started


def test_c05_soundness_at_scale(ssi_campaign, record_property):
    reports, elapsed = ssi_campaign
    cycles = [(name, r["seed"]) for name, rs in reports.items() for r in rs if r["cycle"]]
    missed = [(name, r["seed"]) for name, rs in reports.items() for r in rs if r["missed_flags"]]
    assert all(r["txns"] >= 2000 for rs in reports.values() for r in rs)
    assert not cycles, cycles
    assert not missed, missed
    assert sum(r["crashes"] for r in reports["recovery"]) > 0
    assert sum(r["summarized_total"] for r in reports["capacity1"]) > 0
    assert elapsed < 300
    record_property("detail", f"{len(SEEDS)} seeds x {len(reports)} presets, 0 cycles, {elapsed:.0f} s")


def test_c06_si_exhibits_anomalies(record_property):
    found = sum(1 for seed in SEEDS if fuzz(seed, Mode.SI, preset("default"))["cycle"])
    assert found >= 1
    record_property("detail", f"{found}/{len(SEEDS)} SI seeds with a committed cycle")


def test_c07_safe_retry(ssi_campaign, record_property):
    reports, _ = ssi_campaign
    retries = sum(r["retries"] for rs in reports.values() for r in rs)
    bad = [(name, r["seed"], r["retry_violations"]) for name, rs in reports.items()
           for r in rs if r["retry_violations"]]
    assert retries > 0
    assert not bad, bad
    record_property("detail", f"{retries} retries, 0 violations")


def test_c08_safe_snapshot_and_bounded_memory(record_property):
    e = Engine(deterministic=True)
    seed_rows(e, "t", {f"k{i:03d}": "0" for i in range(200)})
    ro = e.begin("ssi", read_only=True)
    e.scan(ro, "t", "k000", "k199")
    assert len(e.siread) == 0 and ro.safe
    e.commit(ro)

    capacity, max_locks = 8, 64
    e = Engine(deterministic=True, max_committed_tracked=capacity, max_total_locks=max_locks)
    seed_rows(e, "t", {f"k{i:03d}": "0" for i in range(200)})
    pinned = e.begin("ssi")
    e.read(pinned, "t", "k000")
    worst_nodes = worst_locks = 0
    for i in range(100 * capacity):
        t = e.begin("ssi")
        e.read(t, "t", f"k{i % 200:03d}")
        e.scan(t, "t", f"k{(i * 7) % 200:03d}", f"k{(i * 7) % 200 + 5:03d}")
        e.write(t, "t", f"w{i:04d}", "x")
        try:
            e.commit(t)
        except SerializationFailure:
            pass
        s = e.stats()
        worst_nodes = max(worst_nodes, s["nodes_tracked"])
        worst_locks = max(worst_locks, s["locks_held"])
        assert s["nodes_tracked"] <= capacity and s["locks_held"] <= max_locks
    e.commit(pinned)
    record_property("detail", f"peak nodes {worst_nodes}/{capacity}, peak locks {worst_locks}/{max_locks}")


def test_c09_two_phase_commit(tmp_path, record_property):
    path = os.path.join(str(tmp_path), FILENAME)
    e = Engine(deterministic=True, data_dir=str(tmp_path), fsync=False)
    seed_rows(e, "acct", {"x": "100", "y": "100"})
    t = e.begin("ssi")
    e.read(t, "acct", "y")
    e.write(t, "acct", "x", "50")
    e.prepare(t, "g1")
    before = open(path, "rb").read()
    e2 = Engine.recover(str(tmp_path), deterministic=True)  # fresh process image
    assert open(path, "rb").read() == before
    victims = 0
    reader = e2.begin("ssi")
    try:
        e2.read(reader, "acct", "x")
    except SerializationFailure:
        victims += 1
    writer = e2.begin("ssi")
    try:
        e2.write(writer, "acct", "y", "0")
        e2.commit(writer)
    except SerializationFailure:
        victims += 1
    assert victims >= 1
    assert e2.prepared_gids() == ["g1"]
    e2.commit_prepared("g1")
    r = e2.begin("si")
    assert e2.read(r, "acct", "x") == b"50"
    record_property("detail", f"record byte-identical, {victims} other txns aborted")


def test_c10_performance_band(record_property):
    rows = []
    for n in (10, 100, 1000):
        for mode in (Mode.SI, Mode.SERIALIZABLE, Mode.S2PL):
            rows.append(run_sibench(rows=n, readers=4, writers=4, duration=1.0, mode=mode).row())
    os.makedirs(RESULTS, exist_ok=True)
    path = os.path.join(RESULTS, "acceptance_sibench.csv")
    if os.path.exists(path):
        os.remove(path)
    write_csv(path, rows)
    tps = {(r["rows"], r["mode"]): r["throughput_tps"] for r in rows}
    notes = []
    for n in (10, 100, 1000):
        ratio = tps[(n, "ssi")] / max(tps[(n, "si")], 1e-9)
        if ratio < 0.6:
            notes.append(f"rows={n} ssi/si={ratio:.2f}")
        if tps[(n, "ssi")] <= tps[(n, "s2pl")]:
            notes.append(f"rows={n} ssi<=s2pl")
    if notes:
        warnings.warn("performance band missed: " + "; ".join(notes))
    ratios = ", ".join(f"{n}:{tps[(n, 'ssi')] / max(tps[(n, 'si')], 1e-9):.2f}" for n in (10, 100, 1000))
    record_property("detail", f"ssi/si {ratios}" + (" (WARN: " + "; ".join(notes) + ")" if notes else ""))


def test_c11_deferrable_probe(record_property):
    res = run_deferrable_probe(load_writers=8, samples=20, timeout=30.0)
    assert res.timeout_rate < 0.05
    s = res.summary()
    assert s["max_s"] < 30
    record_property("detail", f"median {s['median_s'] * 1000:.1f} ms, max {s['max_s'] * 1000:.1f} ms, "
                              f"timeouts {res.timeouts}/{res.samples}")

