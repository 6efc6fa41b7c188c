import csv
import io
import json
import subprocess
import sys

import pytest

from conftest import seed_rows
from txnlab import Engine
from txnlab.cli import main, parse_duration


def run(*argv):
    out = io.StringIO()
    try:
        code = main(list(argv), out)
    except SystemExit as exc:
        code = exc.code
    return code, out.getvalue()


def test_duration_parsing():
    assert parse_duration("30s") == 30
    assert parse_duration("500ms") == 0.5
    assert parse_duration("2m") == 120
    assert parse_duration("1.5") == 1.5


@pytest.mark.parametrize("mode", ["si", "ssi", "s2pl"])
def test_scenario_passes_in_each_mode(mode):
    code, text = run("scenario", "fig1", "--mode", mode)
    assert code == 0, text
    assert "expectations: pass" in text
    assert ("cycle" in text) == (mode == "si")


def test_scenario_reports_abort_classification():
    code, text = run("scenario", "report-receipts-only")
    assert code == 0
    assert "abort of txn 2: FalsePositive" in text


def test_failed_expectation_exits_1(tmp_path):
    p = tmp_path / "bad.sched"
    p.write_text("S1 BEGIN\nS1 COMMIT\nEXPECT S1 SERIALIZATION_FAILURE\n")
    code, text = run("scenario", str(p))
    assert code == 1 and "EXPECT FAILED" in text


def test_usage_errors_exit_3(tmp_path):
    assert run("scenario", "no-such")[0] == 3
    assert run("bogus-command")[0] == 3
    assert run("scenario", "fig1", "--mode", "chaos")[0] == 3
    assert run("2pc", "list")[0] == 3
    assert run("2pc", "commit", "--data-dir", str(tmp_path))[0] == 3
    assert run("fuzz", "--seeds", "0")[0] == 3


def test_scenario_csv_rows(tmp_path):
    path = tmp_path / "out.csv"
    run("scenario", "fig2", "--csv", str(path), "--seed", "7")
    rows = list(csv.DictReader(open(path)))
    assert rows and rows[0]["scenario"] == "fig2" and rows[0]["seed"] == "7"
    assert json.loads(rows[0]["config"])["max_committed_tracked"] > 0


def test_fuzz_output_is_reproducible_and_writes_figure(tmp_path):
    args = ("fuzz", "--txns", "200", "--seeds", "2", "--seed", "3")
    code, first = run(*args)
    assert code == 0
    assert run(*args)[1] == first
    path = tmp_path / "fuzz.csv"
    code, text = run(*args, "--csv", str(path))
    assert code == 0
    assert len(list(csv.DictReader(open(path)))) == 2
    assert (tmp_path / "fuzz.png").stat().st_size > 0


def test_fuzz_json_lines():
    code, text = run("fuzz", "--txns", "150", "--json")
    report = json.loads(text.splitlines()[0])
    assert report["cycle"] is None and report["seed"] == 0


def test_fuzz_si_cycle_is_not_an_error_but_is_counted():
    code, text = run("fuzz", "--mode", "si", "--txns", "600", "--seeds", "4")
    assert code == 0
    assert "with a committed cycle" in text


def test_sibench_writes_csv_and_plot(tmp_path):
    path = tmp_path / "bench.csv"
    code, text = run("sibench", "--rows", "10", "--duration", "200ms", "--readers", "1",
                     "--writers", "1", "--csv", str(path))
    assert code == 0
    rows = list(csv.DictReader(open(path)))
    assert {r["mode"] for r in rows} == {"si", "ssi", "s2pl"}
    assert (tmp_path / "bench.png").exists()


def test_deferrable_probe_command(tmp_path):
    code, text = run("deferrable", "--load-writers", "2", "--samples", "3",
                     "--plot", str(tmp_path / "lat.png"))
    assert code == 0 and "median_s" in text
    assert (tmp_path / "lat.png").exists()


def test_dump_graph_upto():
    code, text = run("dump-graph", "--scenario", "fig1", "--upto", "9")
    assert code == 0
    assert "out=" in text and "in=" in text
    code, text = run("dump-graph", "--scenario", "fig1", "--json")
    assert json.loads(text) == []


def test_2pc_round_trip(tmp_path):
    e = Engine(deterministic=True, data_dir=str(tmp_path), fsync=False)
    seed_rows(e, "t", {"x": "0"})
    t = e.begin("ssi")
    e.write(t, "t", "x", "1")
    e.prepare(t, "order-17")
    d = str(tmp_path)
    assert run("2pc", "list", "--data-dir", d) == (0, "order-17\n")
    code, _ = run("2pc", "rollback", "nope", "--data-dir", d)
    assert code == 1
    code, text = run("2pc", "commit", "order-17", "--data-dir", d)
    assert code == 0 and "committed order-17" in text
    assert run("2pc", "list", "--data-dir", d) == (0, "")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "txnlab", "scenario", "fig1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
