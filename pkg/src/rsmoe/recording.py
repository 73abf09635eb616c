"""
Line-oriented plain-text records shared by datasets, reports and run logs.

Key-value files:
  - first line: header record, `schema=<name>.v<N>` plus header fields
  - next lines: one record each, tab-separated `key=value` fields
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .errors import DataError

Record = Dict[str, str]


def format_record(record: Mapping[str, object]) -> str:
    parts = []
    for key, value in record.items():
        text = value if isinstance(value, str) else repr(value) if isinstance(value, float) else str(value)
        if "\t" in text or "\n" in text or "=" in key:
            raise DataError(f"field {key!r} cannot be written as a key-value pair")
        parts.append(f"{key}={text}")
    return "\t".join(parts)


def parse_record(line: str) -> Record:
    record: Record = {}
    for part in line.rstrip("\n").split("\t"):
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise DataError(f"malformed field {part[:40]!r}: expected key=value")
        record[key] = value
    return record


def write_records(path: str | Path, header: Mapping[str, object], records: Iterable[Mapping[str, object]]) -> Path:
    if "schema" not in header:
        raise DataError("header record needs a schema field")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8", newline="\n") as f:
        f.write(format_record(header))
        f.write("\n")
        for record in records:
            f.write(format_record(record))
            f.write("\n")
    return p


def read_records(path: str | Path, schema: Optional[str] = None) -> Tuple[Record, List[Record]]:
    p = Path(path)
    header: Record = {}
    records: List[Record] = []
    with p.open("r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            if not header:
                header = parse_record(line)
                continue
            records.append(parse_record(line))
    if schema is not None and header.get("schema") != schema:
        raise DataError(f"{p}: expected schema {schema!r}, found {header.get('schema')!r}")
    return header, records


class RunRecorder:
    """
    Appends one tab-separated line per optimizer step:
      step  stage  role  lr  loss
    Safe to share between the threads of one run.
    """

    COLUMNS = ("step", "stage", "role", "lr", "loss")

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self.rows: List[Tuple[int, str, str, float, float]] = []
        self._lock = threading.Lock()
        self._file = None

    def start(self) -> "RunRecorder":
        if self.path is not None and self._file is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = self.path.open("w", encoding="utf-8", newline="\n")
            self._file.write("\t".join(self.COLUMNS) + "\n")
        return self

    def stop(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None

    def record(self, step: int, stage: str, role: str, lr: float, loss: float) -> None:
        with self._lock:
            self.rows.append((step, stage, role, lr, loss))
            if self._file is not None:
                self._file.write(f"{step}\t{stage}\t{role}\t{lr!r}\t{loss!r}\n")

    def losses(self, stage: Optional[str] = None, role: Optional[str] = None) -> List[float]:
        return [r[4] for r in self.rows if (stage is None or r[1] == stage) and (role is None or r[2] == role)]

    def __enter__(self) -> "RunRecorder":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
