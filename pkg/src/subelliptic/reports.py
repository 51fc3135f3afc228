"""Result records, payload JSON, CSV tables and the append-only JSON-lines ledger."""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import SCHEMA_VERSION, __version__
from .errors import IoError

LEDGER_NAME = "ledger.jsonl"


def to_jsonable(obj):
    """Plain JSON types; non-finite floats become the strings 'inf', '-inf' and 'nan'."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def dumps(payload) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats."""
    return json.dumps(to_jsonable(payload), sort_keys=True, separators=(",", ":"), allow_nan=False)


def format_number(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    """CSV with 17 significant digits and '.' as decimal separator (no locale)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_number(v) for v in row])
    return path


@dataclass
class ResultRecord:
    command: str
    config_hash: str
    payload: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    status: str = "ok"  # ok | flagged
    timestamp: str = ""
    version: str = __version__
    schema: str = SCHEMA_VERSION

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def payload_json(self) -> str:
        return dumps(self.payload)

    def payload_hash(self) -> str:
        return hashlib.sha256(self.payload_json().encode()).hexdigest()[:16]

    def ledger_line(self) -> str:
        return json.dumps({
            "timestamp": self.timestamp, "config_hash": self.config_hash, "command": self.command,
            "artifact_version": self.version, "schema_version": self.schema, "status": self.status,
            "payload_hash": self.payload_hash(), "payload": json.loads(self.payload_json()),
        }, sort_keys=True, separators=(",", ":")) + "\n"


def append_ledger(path, line: str):
    """Append one line atomically: a single write under an exclusive lock."""
    data = line.encode()
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        try:
            view = memoryview(data)
            while view:
                view = view[os.write(fd, view):]
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
    finally:
        os.close(fd)


def write_report(record: ResultRecord, out_dir):
    """Payload JSON, one CSV per table, and a ledger line; returns the created paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        stem = f"{record.command}-{record.config_hash}"
        paths = []
        pj = os.path.join(out_dir, stem + ".json")
        with open(pj, "w", encoding="utf-8") as fh:
            fh.write(record.payload_json() + "\n")
        paths.append(pj)
        for name, (header, rows) in record.tables.items():
            paths.append(write_csv(os.path.join(out_dir, f"{stem}-{name}.csv"), header, rows))
        ledger = os.path.join(out_dir, LEDGER_NAME)
        append_ledger(ledger, record.ledger_line())
        paths.append(ledger)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return paths


def read_ledger(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
