"""x-of-y sliding-window fault events and window-parameter sweeps.

The window is counted in collection points. At every point the trailing
window holds the last ``y`` points of the current segment (a segment ends at a
collection gap longer than ``max_gap``). An event starts at the first point
whose window has at least ``x`` abnormal points and ends at the first later
point whose window has fewer than ``x``. An event still open when its segment
ends closes one nominal cadence after the segment's last point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, NoFeasibleParams
from .model import HOUR, AnomalyEvent

DEFAULT_CADENCE = 4 * HOUR


class EventArrays(NamedTuple):
    """Columnar events: device index, onset-window first point, first/last active point, times."""

    device: np.ndarray
    window_first: np.ndarray
    first: np.ndarray
    last: np.ndarray
    start: np.ndarray
    end: np.ndarray

    def __len__(self) -> int:
        return int(self.start.size)


def _segment_first(segment_start: np.ndarray) -> np.ndarray:
    idx = np.arange(segment_start.size)
    return np.maximum.accumulate(np.where(segment_start, idx, 0))


def window_counts(abnormal: np.ndarray, segment_start: np.ndarray, y: int) -> np.ndarray:
    """Abnormal points in each point's trailing window of (at most) ``y`` points."""
    abnormal = np.asarray(abnormal, dtype=bool)
    n = abnormal.size
    c = np.concatenate([[0], np.cumsum(abnormal, dtype=np.int64)])
    idx = np.arange(n)
    lo = np.maximum(_segment_first(segment_start), idx - y + 1)
    return c[idx + 1] - c[lo]


def detect_arrays(times: np.ndarray, abnormal: np.ndarray, segment_start: np.ndarray,
                  x: int, y: int, cadence: int = DEFAULT_CADENCE,
                  point_device: np.ndarray | None = None) -> EventArrays:
    """Vectorised detector over flattened, segment-delimited label arrays."""
    if not 1 <= x <= y:
        raise ConfigError(f"need 1 <= x <= y, got x={x}, y={y}")
    times = np.asarray(times, dtype=np.int64)
    segment_start = np.asarray(segment_start, dtype=bool)
    n = times.size
    active = window_counts(abnormal, segment_start, y) >= x
    seg_end = np.zeros(n, dtype=bool)
    if n:
        seg_end[:-1] = segment_start[1:]
        seg_end[-1] = True
    prev_active = np.zeros(n, dtype=bool)
    prev_active[1:] = active[:-1]
    next_active = np.zeros(n, dtype=bool)
    next_active[:-1] = active[1:]
    first = np.flatnonzero(active & (segment_start | ~prev_active))
    last = np.flatnonzero(active & (seg_end | ~next_active))
    closes_in_segment = ~seg_end[last]
    end = np.where(closes_in_segment, times[np.minimum(last + 1, n - 1)], times[last] + cadence)
    seg_first = _segment_first(segment_start)
    window_first = np.maximum(seg_first[first], first - y + 1) if n else first
    dev = point_device[first] if point_device is not None else np.zeros(first.size, dtype=np.int64)
    return EventArrays(dev, window_first, first, last, times[first], end)


def sliding_window_detect(times: Sequence[int], abnormal: Sequence[bool], x: int, y: int,
                          device_id: str = "", segment_start: Sequence[bool] | None = None,
                          cadence: int = DEFAULT_CADENCE,
                          rule_masks: Mapping[str, np.ndarray] | None = None) -> list[AnomalyEvent]:
    """Events of one device from its time-ordered normal/abnormal labels."""
    times = np.asarray(times, dtype=np.int64)
    abnormal = np.asarray(abnormal, dtype=bool)
    if segment_start is None:
        segment_start = np.zeros(times.size, dtype=bool)
        segment_start[:1] = True
    ev = detect_arrays(times, abnormal, np.asarray(segment_start, dtype=bool), x, y, cadence)
    return _to_events(ev, abnormal, [device_id], rule_masks)


def _to_events(ev: EventArrays, abnormal: np.ndarray, device_ids: Sequence[str],
               rule_masks: Mapping[str, np.ndarray] | None) -> list[AnomalyEvent]:
    c = np.concatenate([[0], np.cumsum(abnormal, dtype=np.int64)])
    n_abn = c[ev.last + 1] - c[ev.window_first]
    rule_c = {name: np.concatenate([[0], np.cumsum(m & abnormal, dtype=np.int64)])
              for name, m in sorted((rule_masks or {}).items())}
    out = []
    for j in range(len(ev)):
        a, b = int(ev.window_first[j]), int(ev.last[j]) + 1
        rules = tuple(name for name, rc in rule_c.items() if rc[b] > rc[a])
        out.append(AnomalyEvent(device_ids[int(ev.device[j])], int(ev.start[j]), int(ev.end[j]),
                                int(n_abn[j]), rules))
    return out


def detect_events(table, abnormal: np.ndarray, x: int, y: int, cadence: int = DEFAULT_CADENCE,
                  rule_masks: Mapping[str, np.ndarray] | None = None) -> list[AnomalyEvent]:
    """Events for every device of a ``SeriesTable`` given per-point labels."""
    ev = detect_arrays(table.times, abnormal, table.segment_start, x, y, cadence, table.point_device)
    return _to_events(ev, np.asarray(abnormal, dtype=bool), table.device_ids, rule_masks)


def run_detector(table, detector, cadence: int = DEFAULT_CADENCE) -> list[AnomalyEvent]:
    from .training import classify

    abnormal, masks = classify(table, detector.rules)
    return detect_events(table, abnormal, detector.window_x, detector.window_y, cadence, masks)


@dataclass(frozen=True)
class Verdict:
    device_id: str
    at: int
    abnormal: bool
    abnormal_points: int
    window_points: int
    x: int
    y: int
    event: Optional[AnomalyEvent] = None

    def describe(self) -> str:
        if self.abnormal:
            return f"abnormal, x-of-y satisfied ({self.abnormal_points} of last {self.window_points}, x={self.x}, y={self.y})"
        return f"normal ({self.abnormal_points} of last {self.window_points} abnormal, x={self.x}, y={self.y})"


def verdict_at(table, abnormal: np.ndarray, device_id: str, at: int, x: int, y: int,
               cadence: int = DEFAULT_CADENCE) -> Verdict:
    """Single-query diagnosis using only points at or before ``at``."""
    s = table.device_slice(device_id)
    times = table.times[s]
    k = int(np.searchsorted(times, at, side="right"))
    lab = np.asarray(abnormal[s][:k], dtype=bool)
    seg = table.segment_start[s][:k].copy()
    if k:
        seg[0] = True
    events = sliding_window_detect(times[:k], lab, x, y, device_id, seg, cadence)
    hit = next((e for e in reversed(events) if e.start <= at < e.end), None)
    if k == 0:
        return Verdict(device_id, at, False, 0, 0, x, y)
    counts = window_counts(lab, seg, y)
    first = max(int(_segment_first(seg)[-1]), k - y)
    return Verdict(device_id, at, hit is not None, int(counts[-1]), k - first, x, y, hit)


# -- window parameter sweep --------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    x: int
    y: int
    accuracy: Optional[float]
    coverage: Optional[float]
    normalized_rate: Optional[float]
    n_events: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    recommended: tuple[int, int]

    def row(self, x: int, y: int) -> SweepRow:
        return next(r for r in self.rows if r.x == x and r.y == y)


def evaluate_cell(table, abnormal: np.ndarray, tickets, x: int, y: int, observation,
                  cadence: int = DEFAULT_CADENCE) -> SweepRow:
    from .evaluation import event_metrics

    ev = detect_arrays(table.times, abnormal, table.segment_start, x, y, cadence, table.point_device)
    m = event_metrics(ev, tickets, observation)
    return SweepRow(x, y, m["accuracy"], m["coverage"], m["normalized_rate"], len(ev))


def recommend(rows: Iterable[SweepRow], coverage_floor: float = 0.15) -> tuple[int, int]:
    """Highest accuracy among cells meeting the coverage floor.

    Ties go to the higher normalized rate, then the smaller window, then the smaller x.
    """
    feasible = [r for r in rows if r.accuracy is not None and r.coverage is not None
                and r.coverage >= coverage_floor]
    if not feasible:
        raise NoFeasibleParams(f"no (x, y) reaches ticket coverage {coverage_floor}")
    best = min(feasible, key=lambda r: (-r.accuracy, -(r.normalized_rate or 0.0), r.y, r.x))
    return best.x, best.y


def sweep_window_params(table, abnormal: np.ndarray, tickets, y_range: Iterable[int],
                        coverage_floor: float = 0.15, observation=None,
                        cadence: int = DEFAULT_CADENCE) -> SweepResult:
    """Accuracy, coverage and normalized rate for every 1 <= x <= y, y in ``y_range``."""
    from .evaluation import observation_window

    ys = sorted(set(int(y) for y in y_range))
    if not ys:
        raise ConfigError("y_range is empty")
    observation = observation or observation_window(table, cadence)
    rows = [evaluate_cell(table, abnormal, tickets, x, y, observation, cadence)
            for y in ys for x in range(1, y + 1)]
    return SweepResult(rows, recommend(rows, coverage_floor))
