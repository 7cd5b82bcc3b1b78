"""CSV and JSON emission with an embedded experiment header, and the matching reader.

A CSV file starts with ``#`` comment lines of the form ``# key: <json>``,
followed by a mandatory header row and the data rows.  Floats are written
with ``repr`` so values round-trip exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if hasattr(v, "item"):  # numpy scalar
        return _cell(v.item())
    return str(v)


def format_csv(columns: Sequence[str], rows: Iterable[Sequence], meta: dict | None = None) -> str:
    buf = io.StringIO()
    for key, val in (meta or {}).items():
        buf.write(f"# {key}: {json.dumps(val, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, header has {len(columns)}")
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


@dataclass
class Table:
    columns: list[str]
    rows: list[list[str]]
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> list[str]:
        k = self.columns.index(name)
        return [r[k] for r in self.rows]

    def floats(self, name: str) -> list[float]:
        return [float(v) for v in self.column(name)]


def parse_csv(text: str) -> Table:
    meta: dict = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#") and not body:
            key, _, val = line[1:].strip().partition(": ")
            meta[key] = json.loads(val)
        else:
            body.append(line)
    reader = csv.reader(body)
    try:
        columns = next(reader)
    except StopIteration:
        raise ValueError("csv has no header row") from None
    return Table(columns, [row for row in reader], meta)


def read_csv(path) -> Table:
    with open(path, newline="") as fh:
        return parse_csv(fh.read())


def format_json(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
