"""Detection-quality metrics linking events to tickets, plus event and ticket statistics.

Undefined metrics (0/0) are returned as ``None``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .detection import DEFAULT_CADENCE, EventArrays
from .errors import MissingMtr, ZeroDuration
from .model import DAY, HOUR, AnomalyEvent, Interval, PnmRecord, intersect, total_duration, union

_SHIFT = np.int64(1) << np.int64(40)


def observation_window(table, cadence: int = DEFAULT_CADENCE) -> Interval:
    """Span of a dataset: first collection to one cadence past the last."""
    return Interval(int(table.times.min()), int(table.times.max()) + cadence)


def _arrays(events: Sequence[AnomalyEvent], tickets) -> EventArrays:
    dev = np.array([tickets.device_index[e.device_id] for e in events], dtype=np.int64)
    start = np.array([e.start for e in events], dtype=np.int64)
    end = np.array([e.end for e in events], dtype=np.int64)
    z = np.zeros(len(events), dtype=np.int64)
    return EventArrays(dev, z, z, z, start, end)


def fault_groups(device: np.ndarray, start: np.ndarray, end: np.ndarray,
                 node_of_device: Sequence[Optional[str]] | None = None) -> np.ndarray:
    """Group id per event; events overlapping in time (transitively) within one fiber node share a group."""
    n = start.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if node_of_device is None:
        node = np.zeros(n, dtype=np.int64)
    else:
        codes = {v: i for i, v in enumerate(sorted({str(x) for x in node_of_device}))}
        node = np.array([codes[str(node_of_device[d])] for d in device], dtype=np.int64)
    order = np.lexsort((start, node))
    s, e, g = start[order], end[order], node[order]
    new = np.ones(n, dtype=bool)
    # running max of end within each node
    key_end = g.astype(np.int64) * _SHIFT + e
    run_end = np.maximum.accumulate(key_end)
    new[1:] = (g[1:] != g[:-1]) | (g[1:].astype(np.int64) * _SHIFT + s[1:] >= run_end[:-1])
    gid = np.cumsum(new) - 1
    out = np.empty(n, dtype=np.int64)
    out[order] = gid
    return out


def _node_list(tickets) -> Optional[list]:
    nodes = [tickets.fiber_nodes.get(d) for d in tickets.device_ids]
    return nodes if any(n is not None for n in nodes) else None


def _covered_pairs(ev: EventArrays, tickets) -> np.ndarray:
    """Mask over joined (ticket, device) pairs created inside an event of that device."""
    if len(ev) == 0 or tickets.created.size == 0:
        return np.zeros(tickets.created.size, dtype=bool)
    sk = ev.device * _SHIFT + ev.start
    ek = ev.device * _SHIFT + ev.end
    order = np.argsort(sk, kind="stable")
    sk, ek = sk[order], np.maximum.accumulate(ek[order])
    q = tickets.device * _SHIFT + tickets.created
    i = np.searchsorted(sk, q, side="right") - 1
    ok = i >= 0
    ok[ok] &= q[ok] < ek[i[ok]]
    return ok


def _accuracy(ev: EventArrays, tickets) -> Optional[float]:
    if len(ev) == 0:
        return None
    groups = fault_groups(ev.device, ev.start, ev.end, _node_list(tickets))
    hit = tickets.count_in(ev.device, ev.start, ev.end) > 0
    n_groups = int(groups.max()) + 1
    true_groups = np.zeros(n_groups, dtype=bool)
    true_groups[groups[hit]] = True
    return int(true_groups.sum()) / n_groups


def _coverage(ev: EventArrays, tickets) -> Optional[float]:
    total = tickets.matched_tickets
    if total == 0:
        return None
    covered = np.unique(tickets.ticket[_covered_pairs(ev, tickets)]).size
    return covered / total


def _union_time(ev: EventArrays, window: Interval) -> int:
    s = np.clip(ev.start, window.start, window.end)
    e = np.clip(ev.end, window.start, window.end)
    keep = e > s
    dev, s, e = ev.device[keep], s[keep], e[keep]
    if s.size == 0:
        return 0
    order = np.lexsort((s, dev))
    dev, s, e = dev[order], s[order], e[order]
    ek = np.maximum.accumulate(dev * _SHIFT + e)
    prev = np.full(s.size, np.iinfo(np.int64).min)
    prev[1:] = ek[:-1]
    same = np.zeros(s.size, dtype=bool)
    same[1:] = dev[1:] == dev[:-1]
    prev_end = np.where(same, prev - dev * _SHIFT, s)
    return int(np.maximum(0, e - np.maximum(s, prev_end)).sum())


def _normalized_rate(ev: EventArrays, tickets, window: Interval) -> Optional[float]:
    span = window.duration * len(tickets.device_ids)
    if span == 0:
        raise ZeroDuration("observation window has zero duration")
    in_window = (tickets.created >= window.start) & (tickets.created < window.end)
    k_tot = int(in_window.sum())
    t_in = _union_time(ev, window)
    if k_tot == 0 or t_in == 0:
        return None
    k_in = int((_covered_pairs(ev, tickets) & in_window).sum())
    return (k_in * span) / (t_in * k_tot)


def event_metrics(ev: EventArrays, tickets, window: Interval) -> dict[str, Optional[float]]:
    return {"accuracy": _accuracy(ev, tickets), "coverage": _coverage(ev, tickets),
            "normalized_rate": _normalized_rate(ev, tickets, window)}


def ticket_prediction_accuracy(events: Sequence[AnomalyEvent], tickets) -> Optional[float]:
    """Fraction of fault groups during which at least one of their customers filed a ticket."""
    return _accuracy(_arrays(events, tickets), tickets)


def ticket_coverage(events: Sequence[AnomalyEvent], tickets) -> Optional[float]:
    """Fraction of (PNM-matched) tickets created during an event of one of the account's devices."""
    return _coverage(_arrays(events, tickets), tickets)


def normalized_ticketing_rate(events: Sequence[AnomalyEvent], tickets, window: Interval) -> Optional[float]:
    """Ticketing rate inside events over the rate across all devices for the whole window."""
    return _normalized_rate(_arrays(events, tickets), tickets, window)


def jaccard_intervals(a: Sequence[Interval], b: Sequence[Interval]) -> float:
    u = total_duration(union(a, b))
    if u == 0:
        return 1.0
    return total_duration(intersect(a, b)) / u


def jaccard_events(a: Sequence[AnomalyEvent], b: Sequence[AnomalyEvent]) -> float:
    """Jaccard similarity of two event sets over device-time."""
    by_dev_a, by_dev_b = defaultdict(list), defaultdict(list)
    for e in a:
        by_dev_a[e.device_id].append(e.interval)
    for e in b:
        by_dev_b[e.device_id].append(e.interval)
    inter = uni = 0
    for d in set(by_dev_a) | set(by_dev_b):
        inter += total_duration(intersect(by_dev_a[d], by_dev_b[d]))
        uni += total_duration(union(by_dev_a[d], by_dev_b[d]))
    return 1.0 if uni == 0 else inter / uni


# -- distributions ------------------------------------------------------------------

@dataclass
class Distribution:
    values: np.ndarray
    excluded: int = 0

    @property
    def mean(self) -> Optional[float]:
        return float(self.values.mean()) if self.values.size else None

    @property
    def median(self) -> Optional[float]:
        return float(np.median(self.values)) if self.values.size else None

    def cdf(self) -> list[tuple[float, float]]:
        v = np.sort(self.values)
        return [(float(x), (i + 1) / v.size) for i, x in enumerate(v)]

    def pdf(self, bin_width: float) -> list[tuple[float, float]]:
        if not self.values.size:
            return []
        top = float(self.values.max())
        edges = np.arange(0.0, top + bin_width, bin_width)
        if edges.size < 2:
            edges = np.array([0.0, bin_width])
        hist, edges = np.histogram(self.values, bins=edges, density=True)
        return [(float(lo), float(h)) for lo, h in zip(edges[:-1], hist)]

    def summary(self) -> dict:
        return {"n": int(self.values.size), "mean": self.mean, "median": self.median,
                "excluded": self.excluded}


@dataclass
class TicketStats:
    lifetime_hours: Distribution
    waiting_hours: Distribution
    event_length_hours: Distribution
    tables: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"lifetime_hours": self.lifetime_hours.summary(),
                "report_waiting_hours": self.waiting_hours.summary(),
                "event_length_hours": self.event_length_hours.summary()}


def ticket_stats(events: Sequence[AnomalyEvent], tickets, pdf_bin_hours: float = 12.0) -> TicketStats:
    """Lifetime and report-waiting-time distributions of detected tickets; event-length PDF.

    A ticket is detected when created inside an event of one of its account's
    devices; its waiting time is measured from the start of that event.
    """
    ev = _arrays(events, tickets)
    covered = _covered_pairs(ev, tickets)
    waiting = []
    if len(ev):
        sk = ev.device * _SHIFT + ev.start
        order = np.argsort(sk, kind="stable")
        q = tickets.device * _SHIFT + tickets.created
        i = np.searchsorted(sk[order], q, side="right") - 1
        seen = set()
        for p in np.flatnonzero(covered):
            tid = int(tickets.ticket[p])
            if tid in seen:
                continue
            j = order[i[p]]
            if ev.start[j] <= tickets.created[p] < ev.end[j]:
                seen.add(tid)
                waiting.append((tickets.created[p] - ev.start[j]) / HOUR)
    detected = sorted(set(tickets.ticket[covered].tolist()))
    life, open_count = [], 0
    for tid in detected:
        lt = tickets.tickets[tid].lifetime
        if lt is None:
            open_count += 1
        else:
            life.append(lt / HOUR)
    lifetime = Distribution(np.array(life, dtype=float), open_count)
    wait = Distribution(np.array(waiting, dtype=float))
    length = Distribution(np.array([e.duration / HOUR for e in events], dtype=float))
    tables = {"lifetime_cdf": lifetime.cdf(), "report_waiting_cdf": wait.cdf(),
              "event_length_pdf": length.pdf(pdf_bin_hours)}
    return TicketStats(lifetime, wait, length, tables)


# -- MTR comparator -----------------------------------------------------------------

@dataclass
class MtrBaseline:
    fraction: float
    per_day: dict[int, float]
    labels: list[tuple[str, int, bool]]


def mtr_baseline(records: Sequence[PnmRecord], threshold_db: float = 18.0) -> MtrBaseline:
    """Flag a modem at a collection time when any channel's MTR is below the threshold.

    ``per_day`` maps each UTC day start to the fraction of modems seen that day
    with at least one flagged sample; ``fraction`` pools all (modem, day) pairs.
    """
    flagged_at: dict[tuple[str, int], bool] = {}
    for r in records:
        if r.mtr_db is None:
            continue
        key = (r.device_id, r.timestamp)
        flagged_at[key] = flagged_at.get(key, False) or r.mtr_db < threshold_db
    if not flagged_at:
        raise MissingMtr("no record carries an MTR value")
    day_flag: dict[tuple[str, int], bool] = {}
    for (dev, ts), f in flagged_at.items():
        k = (dev, ts - ts % DAY)
        day_flag[k] = day_flag.get(k, False) or f
    per_day: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for (dev, day), f in day_flag.items():
        per_day[day][0] += int(f)
        per_day[day][1] += 1
    fraction = sum(int(f) for f in day_flag.values()) / len(day_flag)
    labels = [(dev, ts, f) for (dev, ts), f in sorted(flagged_at.items())]
    return MtrBaseline(fraction, {d: a / b for d, (a, b) in sorted(per_day.items())}, labels)


def mtr_labels(table, threshold_db: float = 18.0) -> np.ndarray:
    """Per-point MTR flags on a ``SeriesTable`` (worst channel already taken); usable as detector labels."""
    if "mtr" not in table.columns or not np.isfinite(table.columns["mtr"]).any():
        raise MissingMtr("table has no MTR values")
    return table.columns["mtr"] < threshold_db


def metric_report(events: Sequence[AnomalyEvent], tickets, window: Interval) -> dict:
    ev = _arrays(events, tickets)
    out = event_metrics(ev, tickets, window)
    out.update(n_events=len(events), n_tickets=len(tickets.tickets), matched_tickets=tickets.matched_tickets,
               excluded_tickets=tickets.unmatched)
    if len(ev):
        out["n_fault_groups"] = int(fault_groups(ev.device, ev.start, ev.end, _node_list(tickets)).max()) + 1
    else:
        out["n_fault_groups"] = 0
    return out
