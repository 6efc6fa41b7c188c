"""Schedule files and the deterministic multi-session executor.

One step per line::

    S1 BEGIN [RO] [DEFERRABLE] [SI|SSI|S2PL]
    S1 GET <table> <key>
    S1 SCAN <table> <lo> <hi>
    S1 PUT <table> <key> <value>
    S1 DEL <table> <key>
    S1 COMMIT | S1 ABORT | S1 PREPARE <gid>
    S1 COMMIT PREPARED <gid> | S1 ROLLBACK PREPARED <gid>
    EXPECT S1 <outcome> [IF <mode>[,<mode>...]]
    RESUME S1
    CRASH

A step that has to wait is suspended; it is retried at every later step
boundary until its wait clears. Steps a suspended session issues meanwhile
queue up behind it.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Deque, Dict, List, Optional, Tuple

from .engine import Engine, EngineConfig
from .errors import TxnError, TxnNotActive, WouldBlock
from .mvcc import Mode, Status, TxnHandle

OUTCOMES = {"OK", "SERIALIZATION_FAILURE", "WW_CONFLICT", "BLOCKED", "DEADLOCK", "NOT_ACTIVE",
            "READ_ONLY_VIOLATION", "CANNOT_ABORT_PREPARED", "DUPLICATE_GID", "UNKNOWN_GID",
            "DEFERRABLE_TIMEOUT", "INVALID_OPTIONS", "LOCK_TABLE_FULL"}


class ScheduleError(ValueError):
    """Malformed schedule text."""


class ScheduleStuck(RuntimeError):
    """Every remaining session is blocked and nothing can unblock it."""


@dataclass(frozen=True)
class Step:
    lineno: int
    verb: str
    session: Optional[str] = None
    args: Tuple[str, ...] = ()
    text: str = ""


def parse(text: str) -> List[Step]:
    steps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        head = words[0].upper()
        if head == "CRASH":
            steps.append(Step(lineno, "CRASH", text=line))
            continue
        if head in ("EXPECT", "RESUME"):
            if len(words) < 2 or not _is_session(words[1]):
                raise ScheduleError(f"line {lineno}: {head} needs a session")
            args = tuple(words[2:])
            if head == "EXPECT":
                args = _expect_args(lineno, args)
            steps.append(Step(lineno, head, words[1].upper(), args, line))
            continue
        if not _is_session(words[0]) or len(words) < 2:
            raise ScheduleError(f"line {lineno}: expected 'S<k> <statement>', got {line!r}")
        verb = words[1].upper()
        args = tuple(words[2:])
        if verb == "COMMIT" and args and args[0].upper() == "PREPARED":
            verb, args = "COMMIT_PREPARED", args[1:]
        elif verb == "ROLLBACK" and args and args[0].upper() == "PREPARED":
            verb, args = "ROLLBACK_PREPARED", args[1:]
        arity = {"GET": 2, "SCAN": 3, "PUT": 3, "DEL": 2, "COMMIT": 0, "ABORT": 0, "PREPARE": 1,
                 "COMMIT_PREPARED": 1, "ROLLBACK_PREPARED": 1}
        if verb == "BEGIN":
            for a in args:
                if a.upper() not in ("RO", "DEFERRABLE", "SI", "SSI", "S2PL", "SERIALIZABLE"):
                    raise ScheduleError(f"line {lineno}: unknown BEGIN option {a!r}")
        elif verb not in arity:
            raise ScheduleError(f"line {lineno}: unknown statement {verb!r}")
        elif len(args) != arity[verb]:
            raise ScheduleError(f"line {lineno}: {verb} takes {arity[verb]} argument(s)")
        steps.append(Step(lineno, verb, words[0].upper(), args, line))
    return steps


def _is_session(word: str) -> bool:
    return len(word) > 1 and word[0] in "Ss" and word[1:].isdigit()


def _expect_args(lineno: int, args: Tuple[str, ...]) -> Tuple[str, ...]:
    if not args or args[0].upper() not in OUTCOMES:
        raise ScheduleError(f"line {lineno}: EXPECT needs one of {sorted(OUTCOMES)}")
    if len(args) == 1:
        return (args[0].upper(),)
    if len(args) == 3 and args[1].upper() == "IF":
        modes = ",".join(Mode.parse(m).value for m in args[2].split(","))
        return (args[0].upper(), modes)
    raise ScheduleError(f"line {lineno}: expected 'EXPECT S<k> <outcome> [IF <modes>]'")


def load(name_or_path: str) -> Tuple[str, List[Step]]:
    """Parse a shipped schedule by name, or a schedule file by path."""
    if os.path.exists(name_or_path):
        with open(name_or_path, encoding="utf-8") as fh:
            return os.path.splitext(os.path.basename(name_or_path))[0], parse(fh.read())
    name = name_or_path if name_or_path.endswith(".sched") else name_or_path + ".sched"
    res = resources.files("txnlab").joinpath("schedules", name)
    if not res.is_file():
        raise FileNotFoundError(f"no such schedule: {name_or_path} (shipped: {', '.join(shipped())})")
    return name[:-6], parse(res.read_text(encoding="utf-8"))


def shipped() -> List[str]:
    root = resources.files("txnlab").joinpath("schedules")
    return sorted(p.name[:-6] for p in root.iterdir() if p.name.endswith(".sched"))


@dataclass
class Outcome:
    step: int
    session: str
    text: str
    code: str = "PENDING"
    value: object = None
    error: Optional[str] = None
    txn: Optional[int] = None
    blocked_at: Optional[int] = None
    resumed_at: Optional[int] = None
    exc: Optional[BaseException] = field(default=None, repr=False)

    def describe(self) -> str:
        out = f"{self.text:<40} -> {self.code}"
        if self.value is not None:
            out += f" {_show(self.value)}"
        if self.blocked_at is not None:
            out += f" (blocked at step {self.blocked_at}"
            out += f", resumed at step {self.resumed_at})" if self.resumed_at is not None else ")"
        if self.error and self.code != "OK":
            out += f"  [{self.error}]"
        return out


def _show(value) -> str:
    if isinstance(value, bytes):
        return value.decode("utf-8", "backslashreplace")
    if isinstance(value, list):
        return "[" + ", ".join(f"{_show(k)}={_show(v)}" for k, v in value) + "]"
    return str(value)


@dataclass
class _Session:
    name: str
    txn: Optional[TxnHandle] = None
    blocked: Optional[Tuple[Step, Outcome, dict]] = None
    queue: Deque[Tuple[Step, Outcome]] = field(default_factory=deque)
    last: Optional[Outcome] = None


class Executor:
    def __init__(self, engine: Engine, mode: Mode = Mode.SERIALIZABLE):
        if not engine.config.deterministic:
            raise ValueError("the executor needs an engine in deterministic mode")
        self.engine = engine
        self.mode = mode
        self.sessions: Dict[str, _Session] = {}
        self.outcomes: List[Outcome] = []
        self.handles: List[TxnHandle] = []
        self.clock = 0

    def session(self, name: str) -> _Session:
        s = self.sessions.get(name)
        if s is None:
            s = self.sessions[name] = _Session(name)
        return s

    def submit(self, step: Step) -> Outcome:
        self.clock += 1
        sess = self.session(step.session)
        out = Outcome(self.clock, sess.name, step.text)
        self.outcomes.append(out)
        sess.last = out
        if sess.blocked is not None or sess.queue:
            out.code = "BLOCKED"
            out.blocked_at = self.clock
            sess.queue.append((step, out))
        else:
            self._attempt(sess, step, out, {})
        return out

    def blocked(self, name: str) -> bool:
        s = self.sessions.get(name)
        return s is not None and (s.blocked is not None or bool(s.queue))

    def _attempt(self, sess: _Session, step: Step, out: Outcome, state: dict) -> bool:
        try:
            out.value = self._exec(sess, step, state)
            out.code = "OK"
        except WouldBlock:
            out.code = "BLOCKED"
            if out.blocked_at is None:
                out.blocked_at = self.clock
            sess.blocked = (step, out, state)
            return False
        except TxnError as err:
            out.code, out.error, out.exc = err.code, str(err), err
        if out.blocked_at is not None:
            out.resumed_at = self.clock
        out.txn = sess.txn.id if sess.txn is not None else None
        return True

    def settle(self) -> None:
        """Retry suspended sessions until none can make progress."""
        progress = True
        while progress:
            progress = False
            for name in sorted(self.sessions, key=_session_order):
                sess = self.sessions[name]
                while sess.blocked is not None or sess.queue:
                    if sess.blocked is not None:
                        step, out, state = sess.blocked
                        sess.blocked = None
                    else:
                        step, out = sess.queue.popleft()
                        state = {}
                    if not self._attempt(sess, step, out, state):
                        break
                    progress = True

    def cancel(self, name: str) -> None:
        """Drop a session's suspended work and abort its transaction."""
        sess = self.sessions[name]
        for _, out in ([sess.blocked[:2]] if sess.blocked else []) + list(sess.queue):
            out.code = "CANCELLED"
        sess.blocked = None
        sess.queue.clear()
        if sess.txn is not None and sess.txn.status is Status.ACTIVE:
            self.engine.abort(sess.txn)

    def crash(self) -> None:
        self.engine.crash_restart()

    def _exec(self, sess: _Session, step: Step, state: dict):
        e, verb, a = self.engine, step.verb, step.args
        if verb == "BEGIN":
            txn = state.get("txn")
            if txn is None:
                opts = {w.upper() for w in a}
                mode = self.mode
                for m in ("SI", "SSI", "S2PL", "SERIALIZABLE"):
                    if m in opts:
                        mode = Mode.parse(m)
                txn = e.begin(mode, read_only="RO" in opts or "DEFERRABLE" in opts,
                              deferrable="DEFERRABLE" in opts)
                state["txn"] = sess.txn = txn
                self.handles.append(txn)
            if txn.deferrable:
                e.wait_safe(txn)
            return txn.id
        if verb in ("COMMIT_PREPARED", "ROLLBACK_PREPARED"):
            if verb == "COMMIT_PREPARED":
                return e.commit_prepared(a[0])
            e.rollback_prepared(a[0])
            return None
        txn = sess.txn
        if txn is None:
            raise TxnNotActive(f"session {sess.name} has no transaction")
        if verb == "GET":
            return e.read(txn, a[0], a[1])
        if verb == "SCAN":
            return e.scan(txn, a[0], a[1], a[2])
        if verb == "PUT":
            e.write(txn, a[0], a[1], a[2])
            return None
        if verb == "DEL":
            e.delete(txn, a[0], a[1])
            return None
        if verb == "COMMIT":
            return e.commit(txn)
        if verb == "ABORT":
            e.abort(txn)
            return None
        if verb == "PREPARE":
            e.prepare(txn, a[0])
            return None
        raise ScheduleError(f"unhandled statement {verb}")


def _session_order(name: str) -> int:
    return int(name[1:])


@dataclass
class Expectation:
    lineno: int
    session: str
    expected: str
    actual: str
    statement: str

    @property
    def ok(self) -> bool:
        return self.expected == self.actual


@dataclass
class ScheduleResult:
    name: str
    mode: Mode
    engine: Engine
    outcomes: List[Outcome]
    expectations: List[Expectation]
    stuck: List[str]

    @property
    def failures(self) -> List[Expectation]:
        return [x for x in self.expectations if not x.ok]

    @property
    def passed(self) -> bool:
        return not self.failures and not self.stuck

    def txn_status(self) -> Dict[int, Status]:
        return {t: rec.status for t, rec in self.engine.clog.items()}


def run_schedule(steps: List[Step], mode: Mode = Mode.SERIALIZABLE, name: str = "schedule",
                 config: Optional[EngineConfig] = None, strict: bool = False,
                 upto: Optional[int] = None) -> ScheduleResult:
    """Run a parsed schedule; ``upto`` stops after that many statements."""
    cfg = config or EngineConfig()
    engine = Engine(cfg, deterministic=True, record_history=True, track_flags=True)
    ex = Executor(engine, mode)
    expectations: List[Expectation] = []
    executed = 0
    for step in steps:
        if upto is not None and executed >= upto:
            break
        if step.verb not in ("EXPECT", "RESUME"):
            executed += 1
        if step.verb == "CRASH":
            ex.clock += 1
            ex.crash()
        elif step.verb == "RESUME":
            pass
        elif step.verb == "EXPECT":
            if len(step.args) == 2 and mode.value not in step.args[1].split(","):
                continue
            last = ex.sessions.get(step.session)
            actual = last.last.code if last is not None and last.last is not None else "NONE"
            stmt = last.last.text if last is not None and last.last is not None else ""
            expectations.append(Expectation(step.lineno, step.session, step.args[0], actual, stmt))
        else:
            ex.submit(step)
        ex.settle()
    stuck = sorted(n for n in ex.sessions if ex.blocked(n))
    if stuck and strict:
        raise ScheduleStuck(f"sessions {', '.join(stuck)} remain blocked at the end of the schedule")
    return ScheduleResult(name, mode, engine, ex.outcomes, expectations, stuck)
