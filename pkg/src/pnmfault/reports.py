"""Report files: provenance headers, event CSV, sweep CSV and JSON documents.

CSV reports open with ``#`` comment lines carrying the provenance header;
the readers here skip them. Floats are written with ``repr`` so reports
round-trip exactly and are byte-stable across runs.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from . import __version__
from .errors import DataError, MissingColumn
from .model import AnomalyEvent

EVENT_COLUMNS = ("device", "start", "end", "points", "trigger_rules", "fault_type", "cluster_id")
SWEEP_COLUMNS = ("x", "y", "accuracy", "coverage", "normalized_rate", "n_events", "recommended")


def header(config_hash: str, seed: int, command: str) -> dict:
    return {"tool": "pnmfault", "version": __version__, "command": command,
            "config_hash": config_hash, "seed": seed}


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _comment_lines(head: Optional[Mapping]) -> str:
    if not head:
        return ""
    return "".join(f"# {k}: {v}\n" for k, v in head.items())


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], head: Optional[Mapping] = None) -> None:
    buf = io.StringIO()
    buf.write(_comment_lines(head))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(x) for x in r])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict[str, str]]:
    """Rows as dicts, skipping ``#`` header lines."""
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return list(csv.DictReader(lines))


def write_events(path, events: Sequence[AnomalyEvent], head: Optional[Mapping] = None) -> None:
    rows = [(e.device_id, e.start, e.end, e.n_abnormal_points, ";".join(e.trigger_rules),
             e.fault_type, e.cluster_id) for e in events]
    write_csv(path, EVENT_COLUMNS, rows, head)


def read_events(path) -> list[AnomalyEvent]:
    rows = read_csv(path)
    if rows:
        missing = [c for c in EVENT_COLUMNS[:4] if c not in rows[0]]
        if missing:
            raise MissingColumn(missing[0], str(path))
    out = []
    for lineno, r in enumerate(rows, start=2):
        try:
            out.append(AnomalyEvent(r["device"], int(r["start"]), int(r["end"]), int(r["points"]),
                                    tuple(x for x in (r.get("trigger_rules") or "").split(";") if x),
                                    r.get("fault_type") or None, r.get("cluster_id") or None))
        except ValueError as exc:
            raise DataError(f"{path}: event row {lineno}: {exc}") from exc
    return out


def write_sweep(path, result, head: Optional[Mapping] = None) -> None:
    rows = [(r.x, r.y, r.accuracy, r.coverage, r.normalized_rate, r.n_events,
             (r.x, r.y) == tuple(result.recommended)) for r in result.rows]
    write_csv(path, SWEEP_COLUMNS, rows, head)


def write_json(path, doc: Mapping, head: Optional[Mapping] = None) -> None:
    body = {"header": dict(head)} if head else {}
    body.update(doc)
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n")


def write_jsonl(path, docs: Iterable[Mapping], head: Optional[Mapping] = None) -> None:
    lines = [json.dumps({"header": dict(head)}, sort_keys=True)] if head else []
    lines += [json.dumps(d, sort_keys=True, allow_nan=False, default=_jsonable) for d in docs]
    Path(path).write_text("".join(ln + "\n" for ln in lines))


def read_jsonl(path) -> list[dict]:
    docs = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
    return [d for d in docs if set(d) != {"header"}]


def _jsonable(x):
    if hasattr(x, "tolist"):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def finite_or_none(x: Optional[float]) -> Optional[float]:
    """JSON has no infinities; undefined ratios are written as null."""
    if x is None or x != x or x in (float("inf"), float("-inf")):
        return None
    return float(x)
