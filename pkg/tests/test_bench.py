from txnlab.bench import run_deferrable_probe, run_sibench
from txnlab.mvcc import Mode


def test_sibench_counters_are_consistent():
    r = run_sibench(rows=10, readers=2, writers=2, duration=0.3, mode=Mode.SERIALIZABLE)
    assert r.committed > 0
    assert r.attempts == r.committed + r.aborted_serialization + r.aborted_ww + r.aborted_other
    assert 0 <= r.abort_rate <= 1
    assert r.throughput_tps > 0
    row = r.row()
    assert row["mode"] == "ssi" and any(k.startswith("mem_") for k in row)


def test_writers_only_under_si_never_fail_serialization():
    r = run_sibench(rows=1, readers=0, writers=3, duration=0.3, mode=Mode.SI)
    assert r.aborted_serialization == 0
    assert r.committed > 0


def test_s2pl_has_no_serialization_failures():
    r = run_sibench(rows=10, readers=2, writers=2, duration=0.3, mode=Mode.S2PL)
    assert r.aborted_serialization == 0


def test_deferrable_probe_short_run():
    res = run_deferrable_probe(load_writers=2, samples=5, timeout=5.0)
    assert len(res.latencies_s) + res.timeouts == 5
    assert res.timeout_rate == 0
    s = res.summary()
    assert s["median_s"] <= s["p90_s"] <= s["max_s"]
    assert s["mean_iterations"] >= 1
