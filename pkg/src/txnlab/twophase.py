"""Durable prepared-transaction records.

File layout, one record after another::

    P <gid> <txnid>
    A <prepared_at>
    W <table> <key-hex> <value-hex|->
    L <lock-target>
    E <crc32 of the record's preceding lines>
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import CorruptRecord, DuplicateGid, InvalidOptions, UnknownGid
from .locks import LockTarget

FILENAME = "prepared.2pc"


@dataclass
class PreparedRecord:
    gid: str
    txn: int
    writes: List[Tuple[str, bytes, Optional[bytes]]] = field(default_factory=list)
    siread_locks: List[LockTarget] = field(default_factory=list)
    prepared_at: int = 0

    def encode(self) -> str:
        lines = [f"P {self.gid} {self.txn}", f"A {self.prepared_at}"]
        for table, key, value in self.writes:
            lines.append(f"W {table} {key.hex()} {'-' if value is None else value.hex()}")
        for target in self.siread_locks:
            lines.append(f"L {target.encode()}")
        body = "".join(line + "\n" for line in lines)
        return body + f"E {zlib.crc32(body.encode()):08x}\n"


def check_gid(gid: str) -> None:
    if not gid or any(c.isspace() for c in gid):
        raise InvalidOptions(f"invalid gid {gid!r}: must be non-empty with no whitespace")


def _check_name(table: str) -> None:
    if not table or any(c.isspace() for c in table):
        raise CorruptRecord(f"table name {table!r} cannot be stored")


def parse_records(text: str) -> List[PreparedRecord]:
    records: List[PreparedRecord] = []
    current: Optional[PreparedRecord] = None
    body: List[str] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        tag, _, rest = line.partition(" ")
        try:
            if tag == "P":
                if current is not None:
                    raise CorruptRecord(f"line {lineno}: record not terminated")
                gid, txid = rest.split(" ")
                current = PreparedRecord(gid, int(txid))
                body = [line]
                continue
            if current is None:
                raise CorruptRecord(f"line {lineno}: data outside a record")
            if tag == "E":
                expected = zlib.crc32("".join(b + "\n" for b in body).encode())
                if int(rest, 16) != expected:
                    raise CorruptRecord(f"line {lineno}: checksum mismatch for gid {current.gid}")
                records.append(current)
                current = None
                continue
            body.append(line)
            if tag == "A":
                current.prepared_at = int(rest)
            elif tag == "W":
                table, keyhex, valhex = rest.split(" ")
                current.writes.append((table, bytes.fromhex(keyhex),
                                       None if valhex == "-" else bytes.fromhex(valhex)))
            elif tag == "L":
                current.siread_locks.append(LockTarget.decode(rest))
            else:
                raise CorruptRecord(f"line {lineno}: unknown tag {tag!r}")
        except CorruptRecord:
            raise
        except (ValueError, KeyError) as exc:
            raise CorruptRecord(f"line {lineno}: {exc}") from exc
    if current is not None:
        raise CorruptRecord("truncated record at end of file")
    gids = [r.gid for r in records]
    if len(set(gids)) != len(gids):
        raise CorruptRecord("duplicate gid in prepared-state file")
    return records


class PreparedStore:
    """The prepared-state file; every change rewrites it atomically."""

    def __init__(self, data_dir: str, fsync: bool = True):
        self.data_dir = data_dir
        self.path = os.path.join(data_dir, FILENAME)
        self.fsync = fsync
        self.records: Dict[str, PreparedRecord] = {}

    def load(self) -> List[PreparedRecord]:
        if not os.path.exists(self.path):
            self.records = {}
            return []
        with open(self.path, encoding="ascii") as fh:
            records = parse_records(fh.read())
        self.records = {r.gid: r for r in records}
        return records

    def raw(self, gid: str) -> str:
        return self.records[gid].encode()

    def _flush(self) -> None:
        os.makedirs(self.data_dir, exist_ok=True)
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write("".join(r.encode() for r in self.records.values()))
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def add(self, record: PreparedRecord) -> None:
        check_gid(record.gid)
        for table, _, _ in record.writes:
            _check_name(table)
        if record.gid in self.records:
            raise DuplicateGid(f"transaction identifier {record.gid!r} is already in use")
        self.records[record.gid] = record
        try:
            self._flush()
        except OSError:
            del self.records[record.gid]
            raise

    def remove(self, gid: str) -> PreparedRecord:
        record = self.records.pop(gid, None)
        if record is None:
            raise UnknownGid(f"prepared transaction {gid!r} does not exist")
        self._flush()
        return record

    def gids(self) -> List[str]:
        return sorted(self.records)
