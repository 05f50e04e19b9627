"""Report and table serialisation.

Tables are comma-separated text with one header row; floats carry 17
significant digits so that reading a table back is lossless. Reports are
JSON. Every file is written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        text = format(float(v), ".17g")
        # keep integral floats recognisable as floats on the way back in
        return text + ".0" if text.lstrip("-").isdigit() else text
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(format_cell(e) for e in np.asarray(v).ravel().tolist())
    return str(v)


def parse_cell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    if ";" in s:
        return [parse_cell(e) for e in s.split(";")]
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def table_text(rows: list[dict]) -> str:
    if not rows:
        raise ValueError("refusing to write an empty table")
    header = list(rows[0])
    for r in rows[1:]:
        header.extend(k for k in r if k not in header)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_cell(r.get(k)) for k in header])
    return buf.getvalue()


def write_table(path, rows: list[dict]) -> Path:
    return atomic_write(path, table_text(rows))


def read_table(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def write_report(path, report: dict) -> Path:
    return atomic_write(path, json.dumps(_jsonable(report), indent=2) + "\n")


def read_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
