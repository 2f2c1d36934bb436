"""CSV ingestion, ticket filtering and per-device step-function assembly."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyFile, MissingColumn
from .model import (
    COUNTER_METRICS,
    DAY,
    LOW_IS_WORSE,
    METRIC_FIELDS,
    METRICS,
    DeviceSeries,
    Directory,
    PnmRecord,
    Ticket,
)

log = logging.getLogger(__name__)

PNM_SCHEMA = {
    "timestamp": "ts",
    "device_id": "mac",
    "account_id": "account",
    "channel_freq_hz": "freq",
    "snr_db": "snr",
    "tx_power_dbmv": "tx",
    "rx_power_dbmv": "rx",
    "unerrored": "unerr",
    "corrected": "corr",
    "uncorrectable": "uncorr",
    "t3_timeouts": "t3",
    "t4_timeouts": "t4",
    "mtr_db": "mtr",
    "fiber_node": "fiber_node",
}
PNM_OPTIONAL = {"mtr_db", "fiber_node"}

TICKET_SCHEMA = {
    "account_id": "account",
    "created_at": "created",
    "closed_at": "closed",
    "action": "action",
    "description": "description",
    "is_part_of_primary": "part_of_primary",
    "primary_ticket_id": "primary_id",
}
TICKET_OPTIONAL = {"closed_at", "action", "description", "is_part_of_primary", "primary_ticket_id"}

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n", ""}

# Composite search keys are device_index * _KEY_SHIFT + timestamp.
_KEY_SHIFT = np.int64(1) << np.int64(40)


@dataclass
class ParseResult:
    """Parsed rows plus bookkeeping about what was rejected."""

    items: list
    dropped: list[tuple[int, str]] = field(default_factory=list)
    duplicates: int = 0

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class TicketFilterConfig:
    dispatch_actions: frozenset[str] = frozenset({"Dispatch"})
    description_keywords: frozenset[str] = frozenset({"Data Down", "Noisy Line", "Slow Speed"})


def _resolve(header: Sequence[str], schema: Mapping[str, str], optional: set[str], path) -> dict[str, int]:
    pos = {name: i for i, name in enumerate(header)}
    out = {}
    for key, col in schema.items():
        if col in pos:
            out[key] = pos[col]
        elif key not in optional:
            raise MissingColumn(col, str(path))
    return out


def _read_rows(path):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path} is empty")
        rows = list(reader)
    return header, rows


def _finite(text: str) -> float:
    x = float(text)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {text!r}")
    return x


def _count(text: str) -> int:
    n = int(text)
    if n < 0:
        raise ValueError(f"negative counter {text!r}")
    return n


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_pnm_csv(path, schema: Mapping[str, str] | None = None) -> ParseResult:
    """Load PNM records, dropping malformed rows.

    Duplicate (device, channel, timestamp) rows keep the later row. Output is
    sorted by (device_id, timestamp, channel).
    """
    schema = {**PNM_SCHEMA, **(schema or {})}
    header, rows = _read_rows(path)
    col = _resolve(header, schema, PNM_OPTIONAL, path)
    result = ParseResult([])
    by_key: dict[tuple, PnmRecord] = {}
    for lineno, row in enumerate(rows, start=2):
        try:
            mtr = row[col["mtr_db"]].strip() if "mtr_db" in col else ""
            node = row[col["fiber_node"]].strip() if "fiber_node" in col else ""
            rec = PnmRecord(
                device_id=row[col["device_id"]],
                account_id=row[col["account_id"]],
                timestamp=int(row[col["timestamp"]]),
                channel_freq_hz=int(row[col["channel_freq_hz"]]),
                snr_db=_finite(row[col["snr_db"]]),
                tx_power_dbmv=_finite(row[col["tx_power_dbmv"]]),
                rx_power_dbmv=_finite(row[col["rx_power_dbmv"]]),
                unerrored=_count(row[col["unerrored"]]),
                corrected=_count(row[col["corrected"]]),
                uncorrectable=_count(row[col["uncorrectable"]]),
                t3_timeouts=_count(row[col["t3_timeouts"]]),
                t4_timeouts=_count(row[col["t4_timeouts"]]),
                mtr_db=_finite(mtr) if mtr else None,
                fiber_node=node or None,
            )
            if rec.timestamp < 0:
                raise ValueError("negative timestamp")
        except (ValueError, IndexError) as exc:
            result.dropped.append((lineno, str(exc)))
            continue
        key = (rec.device_id, rec.channel_freq_hz, rec.timestamp)
        if key in by_key:
            result.duplicates += 1
        by_key[key] = rec
    result.items = sorted(by_key.values(), key=lambda r: (r.device_id, r.timestamp, r.channel_freq_hz))
    if result.dropped:
        log.warning("%s: dropped %d malformed rows", path, len(result.dropped))
    return result


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_pnm_csv(records: Iterable[PnmRecord], path, schema: Mapping[str, str] | None = None) -> None:
    schema = {**PNM_SCHEMA, **(schema or {})}
    keys = list(schema)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema[k] for k in keys])
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in keys])


def parse_ticket_csv(path, schema: Mapping[str, str] | None = None) -> ParseResult:
    """Load tickets; rows closed before they were created are dropped."""
    schema = {**TICKET_SCHEMA, **(schema or {})}
    header, rows = _read_rows(path)
    col = _resolve(header, schema, TICKET_OPTIONAL, path)
    result = ParseResult([])

    def get(row, key):
        return row[col[key]] if key in col else ""

    for lineno, row in enumerate(rows, start=2):
        try:
            closed = get(row, "closed_at").strip()
            t = Ticket(
                account_id=row[col["account_id"]],
                created_at=int(row[col["created_at"]]),
                closed_at=int(closed) if closed else None,
                action=get(row, "action"),
                description=get(row, "description"),
                is_part_of_primary=_flag(get(row, "is_part_of_primary")),
                primary_ticket_id=get(row, "primary_ticket_id") or None,
            )
            if t.closed_at is not None and t.closed_at < t.created_at:
                raise ValueError("closed before created")
        except (ValueError, IndexError) as exc:
            result.dropped.append((lineno, str(exc)))
            continue
        result.items.append(t)
    return result


def write_ticket_csv(tickets: Iterable[Ticket], path, schema: Mapping[str, str] | None = None) -> None:
    schema = {**TICKET_SCHEMA, **(schema or {})}
    keys = list(schema)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema[k] for k in keys])
        for t in tickets:
            w.writerow([_fmt(getattr(t, k)) for k in keys])


def is_network_ticket(t: Ticket, cfg: TicketFilterConfig) -> bool:
    if t.action in cfg.dispatch_actions:
        return True
    text = t.description.casefold()
    return any(k.casefold() in text for k in cfg.description_keywords)


def filter_network_tickets(tickets: Iterable[Ticket], cfg: TicketFilterConfig | None = None) -> list[Ticket]:
    cfg = cfg or TicketFilterConfig()
    return [t for t in tickets if is_network_ticket(t, cfg)]


# -- step-function assembly ---------------------------------------------------

@dataclass(eq=False)
class SeriesTable:
    """All devices' step functions flattened into aligned arrays.

    Points of device ``k`` occupy ``offsets[k]:offsets[k+1]``. ``hold`` is the
    length of each point's holding interval ``[t_i, t_{i+1})`` and is zero for
    the last point of a device and for points followed by a gap longer than
    ``max_gap``.
    """

    device_ids: list[str]
    offsets: np.ndarray
    times: np.ndarray
    hold: np.ndarray
    columns: dict[str, np.ndarray]
    directory: Directory
    max_gap: int = DAY

    def __post_init__(self):
        self.device_index = {d: k for k, d in enumerate(self.device_ids)}
        self.point_device = np.repeat(np.arange(len(self.device_ids)), np.diff(self.offsets))
        self.keys = self.point_device.astype(np.int64) * _KEY_SHIFT + self.times

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def segment_start(self) -> np.ndarray:
        """True where a point starts a new device or follows a collection gap."""
        start = np.zeros(len(self), dtype=bool)
        start[self.offsets[:-1][np.diff(self.offsets) > 0]] = True
        start[1:] |= self.hold[:-1] == 0
        return start

    def device_slice(self, device_id: str) -> slice:
        k = self.device_index[device_id]
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def series(self, device_id: str, metric: str) -> DeviceSeries:
        s = self.device_slice(device_id)
        return DeviceSeries(device_id, metric, self.times[s], self.columns[metric][s])

    def point_at(self, device_id: str, t: int) -> int:
        """Index of the last point of ``device_id`` at or before ``t`` (-1 if none)."""
        s = self.device_slice(device_id)
        i = int(np.searchsorted(self.times[s], t, side="right")) - 1
        return s.start + i if i >= 0 else -1

    def locate(self, device_idx: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Point whose holding interval contains each (device, t); -1 when none does."""
        device_idx = np.asarray(device_idx, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        if t.size == 0:
            return np.zeros(0, dtype=np.int64)
        i = np.searchsorted(self.keys, device_idx * _KEY_SHIFT + t, side="right") - 1
        first = self.offsets[device_idx]
        ok = i >= first
        ic = np.where(ok, i, 0)
        ok &= t < self.times[ic] + self.hold[ic]
        return np.where(ok, i, -1)

    def total_time(self) -> int:
        return int(self.hold.sum())

    def subset_time(self, start: int | None = None, end: int | None = None) -> "SeriesTable":
        """Points with ``start <= t < end``; holding intervals are recomputed."""
        keep = np.ones(len(self), dtype=bool)
        if start is not None:
            keep &= self.times >= start
        if end is not None:
            keep &= self.times < end
        return self._take(keep)

    def subset_devices(self, device_ids: Iterable[str]) -> "SeriesTable":
        wanted = {self.device_index[d] for d in device_ids}
        keep = np.isin(self.point_device, sorted(wanted))
        return self._take(keep)

    def _take(self, keep: np.ndarray) -> "SeriesTable":
        dev = self.point_device[keep]
        counts = np.bincount(dev, minlength=len(self.device_ids))
        present = np.flatnonzero(counts)
        ids = [self.device_ids[k] for k in present]
        offsets = np.concatenate([[0], np.cumsum(counts[present])]).astype(np.int64)
        times = self.times[keep]
        cols = {m: v[keep] for m, v in self.columns.items()}
        directory = Directory({d: self.directory.devices[d] for d in ids if d in self.directory.devices})
        return SeriesTable(ids, offsets, times, _hold(times, offsets, self.max_gap), cols, directory, self.max_gap)


def _hold(times: np.ndarray, offsets: np.ndarray, max_gap: int) -> np.ndarray:
    hold = np.zeros(times.size, dtype=np.int64)
    if times.size > 1:
        hold[:-1] = np.diff(times)
    last = offsets[1:] - 1
    hold[last[last >= 0]] = 0
    hold[hold > max_gap] = 0
    hold[hold < 0] = 0
    return hold


def _worst(metric: str) -> np.ufunc:
    return np.minimum if metric in LOW_IS_WORSE else np.maximum


def build_table(records: Sequence[PnmRecord], metrics: Sequence[str] = METRICS,
                max_gap: int = DAY) -> SeriesTable:
    """Assemble aligned per-device step functions for every metric.

    Counters are differenced per (device, channel); a drop is a reset and the
    increment is the new raw value. Channels sharing a timestamp are reduced to
    the worst value.
    """
    directory = Directory.from_records(records)
    device_ids = list(directory.devices)
    if not records:
        empty = np.zeros(0, dtype=np.int64)
        return SeriesTable([], np.zeros(1, dtype=np.int64), empty, empty,
                           {m: np.zeros(0) for m in metrics}, directory, max_gap)
    dindex = {d: k for k, d in enumerate(device_ids)}
    dev = np.fromiter((dindex[r.device_id] for r in records), dtype=np.int64, count=len(records))
    ts = np.fromiter((r.timestamp for r in records), dtype=np.int64, count=len(records))
    chan = np.fromiter((r.channel_freq_hz for r in records), dtype=np.int64, count=len(records))
    raw = {m: np.fromiter((r.metric(m) for r in records), dtype=np.float64, count=len(records))
           for m in metrics}
    return table_from_arrays(device_ids, dev, ts, chan, raw, directory, max_gap)


def table_from_arrays(device_ids: list[str], dev: np.ndarray, ts: np.ndarray, chan: np.ndarray,
                      raw: Mapping[str, np.ndarray], directory: Directory, max_gap: int = DAY) -> SeriesTable:
    """Columnar core of :func:`build_table`; ``raw`` holds one value per input row."""
    # difference counters per (device, channel) in time order
    order = np.lexsort((ts, chan, dev))
    dev, ts, chan = dev[order], ts[order], chan[order]
    raw = {m: np.asarray(v, dtype=np.float64)[order] for m, v in raw.items()}
    same_stream = np.zeros(dev.size, dtype=bool)
    same_stream[1:] = (dev[1:] == dev[:-1]) & (chan[1:] == chan[:-1])
    vals = {}
    for m, v in raw.items():
        if m in COUNTER_METRICS:
            inc = v.copy()
            d = np.diff(v)
            cont = same_stream[1:] & (d >= 0)
            inc[1:][cont] = d[cont]
            vals[m] = inc
        else:
            vals[m] = v

    # reduce channels sharing (device, timestamp)
    order = np.lexsort((ts, dev))
    dev, ts = dev[order], ts[order]
    vals = {m: v[order] for m, v in vals.items()}
    new = np.ones(dev.size, dtype=bool)
    new[1:] = (dev[1:] != dev[:-1]) | (ts[1:] != ts[:-1])
    starts = np.flatnonzero(new)
    columns = {}
    for m, v in vals.items():
        if m == "mtr":
            # missing MTR is NaN; fmin/fmax ignore it unless every channel lacks it
            red = np.fmin.reduceat(v, starts) if m in LOW_IS_WORSE else np.fmax.reduceat(v, starts)
        else:
            red = _worst(m).reduceat(v, starts)
        columns[m] = red
    pdev = dev[starts]
    times = ts[starts]
    counts = np.bincount(pdev, minlength=len(device_ids))
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return SeriesTable(list(device_ids), offsets, times, _hold(times, offsets, max_gap), columns,
                       directory, max_gap)


def build_series(records: Sequence[PnmRecord], metric: str, max_gap: int = DAY) -> dict[str, DeviceSeries]:
    table = build_table(records, [metric], max_gap)
    return {d: table.series(d, metric) for d in table.device_ids}


@dataclass(eq=False)
class TicketIndex:
    """Tickets joined to devices through their account.

    One row per (ticket, device) pair; a ticket of an account with several
    devices appears once per device.
    """

    tickets: list[Ticket]
    device: np.ndarray
    created: np.ndarray
    ticket: np.ndarray
    maintenance: np.ndarray
    point: np.ndarray
    device_ids: list[str] = field(default_factory=list)
    fiber_nodes: dict[str, Optional[str]] = field(default_factory=dict)
    unmatched: int = 0

    def __post_init__(self):
        self.device_index = {d: k for k, d in enumerate(self.device_ids)}
        order = np.lexsort((self.created, self.device))
        self._keys = (self.device.astype(np.int64) * _KEY_SHIFT + self.created)[order]
        self._order = order

    def count_in(self, device_idx: np.ndarray, start: np.ndarray, end: np.ndarray,
                 maintenance_only: bool = False) -> np.ndarray:
        """Joined tickets of each device created inside ``[start, end)``."""
        d = np.asarray(device_idx, dtype=np.int64) * _KEY_SHIFT
        if not maintenance_only:
            return (np.searchsorted(self._keys, d + np.asarray(end), side="left")
                    - np.searchsorted(self._keys, d + np.asarray(start), side="left"))
        m = np.concatenate([[0], np.cumsum(self.maintenance[self._order])])
        return (m[np.searchsorted(self._keys, d + np.asarray(end), side="left")]
                - m[np.searchsorted(self._keys, d + np.asarray(start), side="left")])

    @property
    def matched_tickets(self) -> int:
        return int(np.unique(self.ticket).size)

    def point_counts(self, n_points: int, maintenance_only: bool = False) -> np.ndarray:
        sel = self.point >= 0
        if maintenance_only:
            sel &= self.maintenance
        return np.bincount(self.point[sel], minlength=n_points).astype(np.int64)


def join_tickets(table: SeriesTable, tickets: Sequence[Ticket]) -> TicketIndex:
    """Attribute tickets to devices and to the point whose holding interval contains them.

    Tickets from accounts without PNM data are excluded and counted in ``unmatched``.
    """
    by_account = {}
    for d in table.device_ids:
        info = table.directory.devices.get(d)
        if info is not None:
            by_account.setdefault(info.account_id, []).append(table.device_index[d])
    dev, created, tid, maint = [], [], [], []
    unmatched = 0
    for i, t in enumerate(tickets):
        devs = by_account.get(t.account_id)
        if not devs:
            unmatched += 1
            continue
        for k in devs:
            dev.append(k)
            created.append(t.created_at)
            tid.append(i)
            maint.append(t.is_part_of_primary)
    dev = np.array(dev, dtype=np.int64)
    created = np.array(created, dtype=np.int64)
    if unmatched:
        log.info("%d tickets have no matching PNM account", unmatched)
    nodes = {d: table.directory.fiber_node(d) for d in table.device_ids}
    return TicketIndex(list(tickets), dev, created, np.array(tid, dtype=np.int64),
                       np.array(maint, dtype=bool), table.locate(dev, created),
                       list(table.device_ids), nodes, unmatched)
