"""Command-line entry point: ``txnlab <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import re
import sys
from typing import Dict, List, Optional, Sequence

from . import schedule as sched
from .bench import run_deferrable_probe, run_sibench
from .engine import Engine, EngineConfig
from .errors import TxnError
from .fuzz import PRESETS, Fuzzer, preset
from .mvcc import Mode
from .oracle import Oracle

EXIT_OK, EXIT_EXPECT, EXIT_ANOMALY, EXIT_USAGE = 0, 1, 2, 3

# engine settings reachable from the command line and config files
CONFIG_KEYS = ("pages_per_table", "max_keys_per_page", "max_pages_per_relation", "max_total_locks",
               "max_committed_tracked", "summary_table_capacity", "deferrable_max_iterations",
               "deferrable_timeout", "fsync")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_duration(text: str) -> float:
    """'30s', '500ms', '2m' or a bare number of seconds."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*(ms|s|m)?\s*", str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r} (try 30s or 500ms)")
    value = float(m.group(1))
    return value * {"ms": 0.001, "s": 1.0, "m": 60.0, None: 1.0}[m.group(2)]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--mode", choices=["si", "ssi", "s2pl", "serializable"])
    g.add_argument("--data-dir")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--csv", metavar="PATH", help="append result rows to this CSV file")
    g.add_argument("--plot", metavar="PATH", help="figure path (defaults to the CSV path with .png)")
    g.add_argument("--config", metavar="JSON", help="JSON file of engine settings")
    e = p.add_argument_group("engine")
    for key in CONFIG_KEYS:
        flag = "--" + key.replace("_", "-")
        if key == "deferrable_timeout":
            e.add_argument(flag, type=parse_duration, metavar="DURATION")
        elif key == "fsync":
            e.add_argument("--no-fsync", dest="fsync", action="store_const", const=False)
        else:
            e.add_argument(flag, type=int)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="txnlab", description="Snapshot isolation and serializable SI workbench.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("scenario", parents=[common], help="run a shipped or custom schedule")
    p.add_argument("name", help=f"one of {', '.join(sched.shipped())} or a .sched path")

    p = sub.add_parser("sibench", parents=[common], help="multi-threaded update/query benchmark")
    p.add_argument("--rows", default="10,100,1000", help="comma-separated table sizes")
    p.add_argument("--readers", type=int, default=4)
    p.add_argument("--writers", type=int, default=4)
    p.add_argument("--duration", type=parse_duration, default=2.0)
    p.add_argument("--think-time", type=parse_duration, default=0.0001)

    p = sub.add_parser("fuzz", parents=[common], help="random workloads checked by the oracle")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    p.add_argument("--txns", type=int)
    p.add_argument("--keys", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--scan-frac", type=float)
    p.add_argument("--read-only-frac", type=float)
    p.add_argument("--deferrable-frac", type=float)
    p.add_argument("--json", action="store_true", help="print full reports as JSON lines")

    p = sub.add_parser("deferrable", parents=[common], help="deferrable snapshot latency probe")
    p.add_argument("--load-writers", type=int, default=8)
    p.add_argument("--samples", type=int, default=20)

    p = sub.add_parser("dump-graph", parents=[common], help="print the conflict graph of a schedule")
    p.add_argument("--scenario", required=True)
    p.add_argument("--upto", type=int, help="stop after this many statements")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("2pc", parents=[common], help="inspect or resolve prepared transactions")
    p.add_argument("action", choices=["list", "commit", "rollback"])
    p.add_argument("gid", nargs="?")
    return parser


def engine_config(args) -> EngineConfig:
    values: Dict[str, object] = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in CONFIG_KEYS:
                raise UsageError(f"unknown config key {k!r}")
            values[key] = parse_duration(v) if key == "deferrable_timeout" and isinstance(v, str) else v
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.data_dir:
        values["data_dir"] = args.data_dir
    return EngineConfig(**values)


def _mode(args, default: Mode) -> Mode:
    return Mode.parse(args.mode) if args.mode else default


def _config_blob(config: EngineConfig) -> str:
    return json.dumps({k: getattr(config, k) for k in CONFIG_KEYS}, sort_keys=True)


def write_csv(path: str, rows: Sequence[Dict[str, object]]) -> None:
    """Append rows; a header is written when the file is new."""
    if not rows:
        return
    fields = list(rows[0])
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})


def _plot_path(args) -> Optional[str]:
    if args.plot:
        return args.plot
    if args.csv:
        return os.path.splitext(args.csv)[0] + ".png"
    return None


def _show(value) -> str:
    if isinstance(value, bytes):
        return value.decode("utf-8", "replace")
    if isinstance(value, list):
        return "[" + ", ".join(_show(v) for v in value) + "]"
    if isinstance(value, tuple):
        return "(" + ", ".join(_show(v) for v in value) + ")"
    return "" if value is None else str(value)


# -- subcommands

def cmd_scenario(args, out) -> int:
    config = engine_config(args)
    mode = _mode(args, Mode.SERIALIZABLE)
    try:
        name, steps = sched.load(args.name)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    result = sched.run_schedule(steps, mode, name, config)
    print(f"scenario {name} mode={mode.value}", file=out)
    for o in result.outcomes:
        val = f" -> {_show(o.value)}" if o.code == "OK" and o.value is not None else ""
        err = f" ({o.error})" if o.error else ""
        if o.blocked_at is not None:
            err += f" [blocked at step {o.blocked_at}]"
        print(f"  [{o.step:3d}] {o.text:<40} {o.code}{val}{err}", file=out)
    for table in sorted(result.engine.tables):
        state = result.engine.snapshot_table(table)
        body = ", ".join(f"{_show(k)}={_show(v)}" for k, v in sorted(state.items()))
        print(f"  table {table}: {body or '(empty)'}", file=out)
    oracle = Oracle(result.engine.history)
    cycle, _ = oracle.cycle()
    print(f"  committed history: {'cycle ' + str(cycle) if cycle else 'serializable'}", file=out)
    for t in oracle.serialization_aborts():
        print(f"  abort of txn {t}: {oracle.classify_abort(t)}", file=out)
    if result.stuck:
        print(f"  still blocked: {', '.join(result.stuck)}", file=out)
    for x in result.failures:
        print(f"  EXPECT FAILED line {x.lineno}: {x.session} expected {x.expected}, got {x.actual}"
              f" after '{x.statement}'", file=out)
    if args.csv:
        write_csv(args.csv, [{"scenario": name, "mode": mode.value, "seed": args.seed, "step": o.step,
                              "statement": o.text, "outcome": o.code, "value": _show(o.value),
                              "config": _config_blob(config)} for o in result.outcomes])
    if result.failures or result.stuck:
        return EXIT_EXPECT
    if cycle and mode is not Mode.SI:
        return EXIT_ANOMALY
    print("  expectations: pass", file=out)
    return EXIT_OK


def cmd_sibench(args, out) -> int:
    config = engine_config(args)
    try:
        sizes = [int(x) for x in args.rows.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --rows {args.rows!r}") from exc
    if not sizes or min(sizes) < 1:
        raise UsageError("--rows must list sizes >= 1")
    modes = [_mode(args, Mode.SERIALIZABLE)] if args.mode else list(Mode)
    rows = []
    print(f"{'mode':<5} {'rows':>6} {'committed':>9} {'tps':>9} {'ser.abort':>9} {'ww.abort':>8} "
          f"{'abort%':>7}", file=out)
    for n in sizes:
        for mode in modes:
            r = run_sibench(n, args.readers, args.writers, args.duration, mode, args.seed,
                            args.think_time, config)
            print(f"{r.mode:<5} {n:>6} {r.committed:>9} {r.throughput_tps:>9.1f} "
                  f"{r.aborted_serialization:>9} {r.aborted_ww:>8} {100 * r.abort_rate:>6.2f}%", file=out)
            row = r.row()
            row.update(seed=args.seed, think_time=args.think_time, config=_config_blob(config))
            rows.append(row)
    if args.csv:
        write_csv(args.csv, rows)
    path = _plot_path(args)
    if path:
        from .plotting import plot_sibench
        print(f"figure: {plot_sibench(rows, path)}", file=out)
    return EXIT_OK


def _fuzz_config(args):
    overrides = {}
    for flag, field in (("txns", "n_txns"), ("keys", "n_keys"), ("sessions", "n_sessions"),
                        ("scan_frac", "scan_frac"), ("read_only_frac", "read_only_frac"),
                        ("deferrable_frac", "deferrable_frac")):
        v = getattr(args, flag)
        if v is not None:
            overrides[field] = v
    cfg = preset(args.preset, **overrides)
    engine = dict(cfg.engine)
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            engine[key] = v
    return dataclasses.replace(cfg, engine=engine)


def cmd_fuzz(args, out) -> int:
    mode = _mode(args, Mode.SERIALIZABLE)
    cfg = _fuzz_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    reports = []
    status = EXIT_OK
    for seed in range(args.seed, args.seed + args.seeds):
        try:
            rep = Fuzzer(seed, mode, cfg).run()
        except sched.ScheduleStuck as exc:
            print(f"seed {seed}: workload stuck: {exc}", file=out)
            status = max(status, EXIT_EXPECT)
            continue
        reports.append(rep)
        if args.json:
            print(json.dumps(rep, sort_keys=True), file=out)
        else:
            print(f"seed {seed} mode={rep['mode']} txns={rep['txns']} committed={rep['committed']} "
                  f"ser_aborts={rep['aborted_serialization']} ww_aborts={rep['aborted_ww']} "
                  f"fp_rate={rep['false_positive_rate']:.3f} cycle={rep['cycle'] or '-'} "
                  f"missed_flags={len(rep['missed_flags'])} retry_violations={len(rep['retry_violations'])}",
                  file=out)
        if mode is Mode.SERIALIZABLE or mode is Mode.S2PL:
            if rep["cycle"]:
                status = EXIT_ANOMALY
            elif rep["missed_flags"] or rep["retry_violations"]:
                status = max(status, EXIT_EXPECT)
    cycles = sum(1 for r in reports if r["cycle"])
    print(f"summary: {len(reports)} seeds, {cycles} with a committed cycle", file=out)
    if args.csv:
        blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
        write_csv(args.csv, [dict(r, preset=args.preset, config=blob) for r in reports])
    path = _plot_path(args)
    if path and reports:
        from .plotting import plot_fuzz
        print(f"figure: {plot_fuzz(reports, path)}", file=out)
    return status


def cmd_deferrable(args, out) -> int:
    config = engine_config(args)
    timeout = config.deferrable_timeout if config.deferrable_timeout is not None else 30.0
    res = run_deferrable_probe(args.load_writers, args.samples, timeout, args.seed, config=config)
    summary = res.summary()
    for k, v in summary.items():
        print(f"{k:>16}: {v}", file=out)
    if args.csv:
        row = dict(summary, seed=args.seed, config=_config_blob(config))
        write_csv(args.csv, [row])
    path = _plot_path(args)
    if path:
        from .plotting import plot_latency
        print(f"figure: {plot_latency(res.latencies_s, path)}", file=out)
    return EXIT_OK


def cmd_dump_graph(args, out) -> int:
    config = engine_config(args)
    try:
        name, steps = sched.load(args.scenario)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    result = sched.run_schedule(steps, _mode(args, Mode.SERIALIZABLE), name, config, upto=args.upto)
    rows = result.engine.dump_graph()
    if args.json:
        print(json.dumps(rows, indent=1), file=out)
        return EXIT_OK
    for r in rows:
        print(f"{r['id']} flags={','.join(r['flags']) or '-'} commit_seq={r['commit_seq']} "
              f"snapshot_seq={r['snapshot_seq']} out={sorted(r['out'])} in={sorted(r['in'])}", file=out)
    if not rows:
        print("(no tracked nodes)", file=out)
    return EXIT_OK


def cmd_2pc(args, out) -> int:
    if not args.data_dir:
        raise UsageError("2pc needs --data-dir")
    if args.action != "list" and not args.gid:
        raise UsageError(f"2pc {args.action} needs a gid")
    engine = Engine.recover(args.data_dir, engine_config(args))
    if args.action == "list":
        for gid in engine.prepared_gids():
            print(gid, file=out)
        return EXIT_OK
    if args.action == "commit":
        seq = engine.commit_prepared(args.gid)
        print(f"committed {args.gid} at commit sequence {seq}", file=out)
    else:
        engine.rollback_prepared(args.gid)
        print(f"rolled back {args.gid}", file=out)
    return EXIT_OK


COMMANDS = {"scenario": cmd_scenario, "sibench": cmd_sibench, "fuzz": cmd_fuzz,
            "deferrable": cmd_deferrable, "dump-graph": cmd_dump_graph, "2pc": cmd_2pc}


def main(argv: Optional[List[str]] = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"txnlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TxnError as exc:
        print(f"txnlab: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_EXPECT


if __name__ == "__main__":
    sys.exit(main())
