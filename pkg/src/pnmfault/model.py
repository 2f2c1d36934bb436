"""Shared domain types, metric conventions and interval-set arithmetic.

Time is integer seconds since the epoch (UTC) throughout. Intervals are
half-open ``[start, end)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

DAY = 86_400
HOUR = 3_600

# Metric channel name -> PnmRecord attribute.
METRIC_FIELDS = {
    "snr": "snr_db",
    "tx_power": "tx_power_dbmv",
    "rx_power": "rx_power_dbmv",
    "unerrored": "unerrored",
    "corrected": "corrected",
    "uncorrectable": "uncorrectable",
    "t3_timeouts": "t3_timeouts",
    "t4_timeouts": "t4_timeouts",
    "mtr": "mtr_db",
}
METRICS: tuple[str, ...] = tuple(METRIC_FIELDS)
COUNTER_METRICS = frozenset({"unerrored", "corrected", "uncorrectable", "t3_timeouts", "t4_timeouts"})
# Lower is worse for these; the worst channel is the minimum.
LOW_IS_WORSE = frozenset({"snr", "mtr"})
LEVEL_FIELDS = ("snr_db", "tx_power_dbmv", "rx_power_dbmv")
COUNTER_FIELDS = ("unerrored", "corrected", "uncorrectable", "t3_timeouts", "t4_timeouts")


@dataclass(frozen=True)
class PnmRecord:
    device_id: str
    account_id: str
    timestamp: int
    channel_freq_hz: int
    snr_db: float
    tx_power_dbmv: float
    rx_power_dbmv: float
    unerrored: int
    corrected: int
    uncorrectable: int
    t3_timeouts: int
    t4_timeouts: int
    mtr_db: Optional[float] = None
    fiber_node: Optional[str] = None

    def metric(self, name: str) -> float:
        value = getattr(self, METRIC_FIELDS[name])
        return math.nan if value is None else float(value)


@dataclass(frozen=True)
class Ticket:
    account_id: str
    created_at: int
    closed_at: Optional[int] = None
    action: str = ""
    description: str = ""
    is_part_of_primary: bool = False
    primary_ticket_id: Optional[str] = None

    @property
    def lifetime(self) -> Optional[int]:
        if self.closed_at is None:
            return None
        return self.closed_at - self.created_at


@dataclass(frozen=True, order=True)
class Interval:
    start: int
    end: int

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError(f"empty interval [{self.start}, {self.end})")

    @property
    def duration(self) -> int:
        return self.end - self.start

    def contains(self, t: int) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True, eq=False)
class DeviceSeries:
    """Right-continuous step function of one metric on one device."""

    device_id: str
    metric_name: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if times.shape != values.shape:
            raise ValueError("times and values differ in length")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.times.tolist(), self.values.tolist()))

    def value_at(self, t: int) -> float:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        if i < 0:
            raise KeyError(f"{self.device_id}: no point at or before {t}")
        return float(self.values[i])


class Issue(NamedTuple):
    code: str
    field: str

    def __str__(self) -> str:
        return f"{self.code}({self.field!r})"


@dataclass(frozen=True)
class Validation:
    violations: tuple[Issue, ...] = ()
    annotations: tuple[Issue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_record(r: PnmRecord, previous: PnmRecord | None = None) -> Validation:
    """Check a record's invariants; ``previous`` is the prior sample of the same device and channel.

    A counter that drops relative to ``previous`` is a reset and is reported as an
    annotation, not a violation.
    """
    violations: list[Issue] = []
    annotations: list[Issue] = []
    if r.timestamp < 0:
        violations.append(Issue("NegativeTimestamp", "timestamp"))
    for name in LEVEL_FIELDS:
        if not math.isfinite(getattr(r, name)):
            violations.append(Issue("NonFiniteMetric", name))
    if r.mtr_db is not None and not math.isfinite(r.mtr_db):
        violations.append(Issue("NonFiniteMetric", "mtr_db"))
    for name in COUNTER_FIELDS:
        if getattr(r, name) < 0:
            violations.append(Issue("NegativeCounter", name))
    if previous is not None:
        if r.timestamp <= previous.timestamp:
            violations.append(Issue("NonIncreasingTimestamp", "timestamp"))
        for name in COUNTER_FIELDS:
            if getattr(r, name) < getattr(previous, name):
                annotations.append(Issue("CounterReset", name))
    return Validation(tuple(violations), tuple(annotations))


# -- interval sets -----------------------------------------------------------

def normalize(intervals: Iterable[Interval]) -> list[Interval]:
    """Sorted, pairwise-disjoint union; touching intervals are merged."""
    out: list[Interval] = []
    for iv in sorted(intervals):
        if out and iv.start <= out[-1].end:
            if iv.end > out[-1].end:
                out[-1] = Interval(out[-1].start, iv.end)
        else:
            out.append(iv)
    return out


def total_duration(intervals: Iterable[Interval]) -> int:
    return sum(iv.duration for iv in normalize(intervals))


def union(a: Iterable[Interval], b: Iterable[Interval]) -> list[Interval]:
    return normalize([*a, *b])


def intersect(a: Iterable[Interval], b: Iterable[Interval]) -> list[Interval]:
    a, b = normalize(a), normalize(b)
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i].start, b[j].start)
        hi = min(a[i].end, b[j].end)
        if lo < hi:
            out.append(Interval(lo, hi))
        if a[i].end < b[j].end:
            i += 1
        else:
            j += 1
    return out


def complement(periods: Iterable[Interval], window: Interval) -> list[Interval]:
    """The part of ``window`` not covered by ``periods``."""
    out = []
    cursor = window.start
    for iv in intersect(periods, [window]):
        if iv.start > cursor:
            out.append(Interval(cursor, iv.start))
        cursor = iv.end
    if cursor < window.end:
        out.append(Interval(cursor, window.end))
    return out


def interval_arrays(intervals: Sequence[Interval]) -> tuple[np.ndarray, np.ndarray]:
    iv = normalize(intervals)
    return (np.array([x.start for x in iv], dtype=np.int64),
            np.array([x.end for x in iv], dtype=np.int64))


def count_inside(times: np.ndarray, intervals: Sequence[Interval]) -> int:
    """Number of timestamps falling in the union of ``intervals``."""
    starts, ends = interval_arrays(intervals)
    if starts.size == 0:
        return 0
    times = np.asarray(times, dtype=np.int64)
    k = np.searchsorted(starts, times, side="right") - 1
    ok = k >= 0
    return int(np.count_nonzero(times[ok] < ends[k[ok]]))


@dataclass(frozen=True)
class DeviceInfo:
    """Static per-device attributes gathered at ingestion."""

    device_id: str
    account_id: str
    fiber_node: Optional[str] = None


@dataclass
class Directory:
    """Device <-> account <-> fiber node lookups."""

    devices: dict[str, DeviceInfo] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Iterable[PnmRecord]) -> "Directory":
        devices: dict[str, DeviceInfo] = {}
        for r in records:
            if r.device_id not in devices:
                devices[r.device_id] = DeviceInfo(r.device_id, r.account_id, r.fiber_node)
        return cls(dict(sorted(devices.items())))

    def devices_of_account(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for info in self.devices.values():
            out.setdefault(info.account_id, []).append(info.device_id)
        return out

    def fiber_node(self, device_id: str) -> Optional[str]:
        info = self.devices.get(device_id)
        return info.fiber_node if info else None

    @property
    def has_fiber_nodes(self) -> bool:
        return any(d.fiber_node is not None for d in self.devices.values())


MAINTENANCE = "maintenance"
SERVICE = "service"


@dataclass(frozen=True)
class AnomalyEvent:
    """A contiguous faulty interval ``[start, end)`` of one device."""

    device_id: str
    start: int
    end: int
    n_abnormal_points: int
    trigger_rules: tuple[str, ...] = ()
    fault_type: Optional[str] = None
    cluster_id: Optional[str] = None

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError(f"empty event [{self.start}, {self.end}) on {self.device_id}")

    @property
    def interval(self) -> Interval:
        return Interval(self.start, self.end)

    @property
    def duration(self) -> int:
        return self.end - self.start

    def to_dict(self) -> dict:
        return {"device": self.device_id, "start": self.start, "end": self.end,
                "points": self.n_abnormal_points, "trigger_rules": list(self.trigger_rules),
                "fault_type": self.fault_type, "cluster_id": self.cluster_id}
