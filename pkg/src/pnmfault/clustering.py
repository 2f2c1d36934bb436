"""Fault typing: average-linkage clustering of concurrently anomalous devices.

Devices whose anomalies overlap in time within one fiber node are clustered
per feature (raw SNR and Tx power by default) on the Pearson correlation of
their step-function samples. A device grouped with enough other anomalous
devices is diagnosed as a maintenance (shared plant) fault, otherwise as a
service (single premise) fault. The similarity cutoff of each feature is
chosen by grid search on the maintenance ticketing-rate ratio.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .detection import DEFAULT_CADENCE
from .errors import InsufficientOverlap, MismatchedDevices, NoMaintenanceTickets
from .evaluation import fault_groups
from .model import MAINTENANCE, SERVICE, AnomalyEvent, Interval

log = logging.getLogger(__name__)

CLUSTER_FEATURES = ("snr", "tx_power")
DEFAULT_GRID = tuple(round(0.5 + 0.01 * k, 2) for k in range(50))
UNDEFINED = float("-inf")


# -- partitions and pair-counting scores ------------------------------------------

class Partition(dict):
    """Mapping device id -> cluster label."""

    def clusters(self) -> list[list[str]]:
        groups: dict = {}
        for d in sorted(self):
            groups.setdefault(self[d], []).append(d)
        return sorted(groups.values())

    @classmethod
    def from_clusters(cls, clusters: Iterable[Iterable[str]]) -> "Partition":
        p = cls()
        for members in clusters:
            members = sorted(members)
            for d in members:
                p[d] = members[0]
        return p


def _pair_counts(p: Mapping, q: Mapping) -> tuple[int, int, int, int]:
    if set(p) != set(q):
        raise MismatchedDevices("partitions cover different devices")
    n = len(p)
    cont: dict = {}
    a: dict = {}
    b: dict = {}
    for d in p:
        cont[(p[d], q[d])] = cont.get((p[d], q[d]), 0) + 1
        a[p[d]] = a.get(p[d], 0) + 1
        b[q[d]] = b.get(q[d], 0) + 1
    c2 = lambda k: k * (k - 1) // 2  # noqa: E731
    return sum(map(c2, cont.values())), sum(map(c2, a.values())), sum(map(c2, b.values())), c2(n)


def rand_index(p: Mapping, q: Mapping) -> float:
    """(TP + TN) / all pairs."""
    both, same_p, same_q, pairs = _pair_counts(p, q)
    if pairs == 0:
        return 1.0
    fp = same_p - both
    fn = same_q - both
    return (pairs - fp - fn) / pairs


def adjusted_rand_index(p: Mapping, q: Mapping) -> float:
    """Rand index corrected for chance under the hypergeometric model."""
    both, same_p, same_q, pairs = _pair_counts(p, q)
    if pairs == 0:
        return 1.0
    expected = Fraction(same_p * same_q, pairs)
    top = Fraction(same_p + same_q, 2)
    if top == expected:
        return 1.0 if same_p == same_q == both else 0.0
    return float((both - expected) / (top - expected))


# -- similarity -----------------------------------------------------------------------

def _hold_values(times: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    i = np.searchsorted(times, grid, side="right") - 1
    out = np.full(grid.size, np.nan)
    ok = i >= 0
    out[ok] = values[i[ok]]
    return out


def _pearson(u: np.ndarray, v: np.ndarray) -> float:
    cu = bool(np.all(u == u[0]))
    cv = bool(np.all(v == v[0]))
    if cu or cv:
        return 1.0 if cu and cv else 0.0
    u = u - u.mean()
    v = v - v.mean()
    # scaling to unit max keeps tiny variations from underflowing in the products
    su, sv = np.abs(u).max(), np.abs(v).max()
    if su == 0 or sv == 0:
        return 1.0 if su == sv else 0.0
    u, v = u / su, v / sv
    r = float((u @ v) / math.sqrt(float(u @ u) * float(v @ v)))
    return min(1.0, max(-1.0, r))


def aligned_similarity(ta, va, tb, vb, window: Interval, min_samples: int = 3) -> float:
    ta, tb = np.asarray(ta, dtype=np.int64), np.asarray(tb, dtype=np.int64)
    va, vb = np.asarray(va, dtype=np.float64), np.asarray(vb, dtype=np.float64)
    grid = np.union1d(ta[(ta >= window.start) & (ta < window.end)],
                      tb[(tb >= window.start) & (tb < window.end)])
    u = _hold_values(ta, va, grid)
    v = _hold_values(tb, vb, grid)
    ok = np.isfinite(u) & np.isfinite(v)
    if ok.sum() < min_samples:
        raise InsufficientOverlap(f"{int(ok.sum())} aligned samples in [{window.start}, {window.end})")
    return _pearson(u[ok], v[ok])


def pairwise_similarity(a, b, window: Interval) -> float:
    """Pearson correlation of two step-function series sampled on their union timestamps in ``window``.

    Accepts anything with ``times`` and ``values`` (DeviceSeries, FeatureSeries).
    """
    return aligned_similarity(a.times, a.values, b.times, b.values, window)


def similarity_matrix(series: Sequence, window: Interval) -> np.ndarray:
    """Pairwise similarities; pairs without enough overlap score 0."""
    n = len(series)
    s = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            try:
                s[i, j] = s[j, i] = pairwise_similarity(series[i], series[j], window)
            except InsufficientOverlap:
                s[i, j] = s[j, i] = 0.0
    return s


# -- average linkage ---------------------------------------------------------------------

def average_linkage(devices: Sequence[str], similarity: np.ndarray, cutoff: float) -> Partition:
    """Merge the most similar pair of clusters while their average similarity is >= ``cutoff``.

    Cluster similarity is the mean over all cross-cluster device pairs. Ties
    go to the pair whose smallest member ids sort first.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    order = sorted(range(len(devices)), key=lambda i: devices[i])
    members = [[devices[i]] for i in order]
    sums = similarity[np.ix_(order, order)].copy()
    sizes = np.ones(len(members))
    while len(members) > 1:
        avg = sums / np.outer(sizes, sizes)
        np.fill_diagonal(avg, -np.inf)
        best = avg.max()
        if not best >= cutoff:
            break
        # members stay sorted by smallest id, so the first hit in row-major order wins ties
        i, j = (int(k) for k in np.argwhere(avg == best)[0])
        i, j = min(i, j), max(i, j)
        members[i] = members[i] + members[j]
        sums[i, :] += sums[j, :]
        sums[:, i] += sums[:, j]
        sums = np.delete(np.delete(sums, j, axis=0), j, axis=1)
        sizes[i] += sizes[j]
        sizes = np.delete(sizes, j)
        del members[j]
    return Partition.from_clusters(members)


def classify_fault_type(anomalous: Iterable[str], partitions: Mapping[str, Mapping[str, str]],
                        min_group: int = 2, combine: str = "any") -> dict[str, str]:
    """Maintenance when a device shares a cluster with >= min_group - 1 other anomalous devices.

    ``combine`` is "any" (grouped under at least one feature) or "all".
    """
    anomalous = sorted(set(anomalous))
    grouped: dict[str, list[bool]] = {d: [] for d in anomalous}
    for part in partitions.values():
        sizes: dict = {}
        for d in anomalous:
            if d in part:
                sizes[part[d]] = sizes.get(part[d], 0) + 1
        for d in anomalous:
            grouped[d].append(d in part and sizes[part[d]] >= min_group)
    pick = any if combine == "any" else all
    return {d: MAINTENANCE if flags and pick(flags) else SERVICE for d, flags in grouped.items()}


# -- pipeline -------------------------------------------------------------------------------

@dataclass
class Component:
    """Devices with transitively overlapping events inside one fiber node."""

    fiber_node: Optional[str]
    window: Interval
    devices: list[str]
    event_ids: list[int]
    event_devices: list[str]
    similarity: dict[str, np.ndarray] = field(default_factory=dict)


def components(table, events: Sequence[AnomalyEvent], margin: int) -> list[Component]:
    if not events:
        return []
    node_of = {d: table.directory.fiber_node(d) for d in table.device_ids}
    if not any(v is not None for v in node_of.values()):
        log.warning("no fiber_node information; clustering the whole dataset as one node")
    dindex = table.device_index
    dev = np.array([dindex[e.device_id] for e in events], dtype=np.int64)
    start = np.array([e.start for e in events], dtype=np.int64)
    end = np.array([e.end for e in events], dtype=np.int64)
    groups = fault_groups(dev, start, end, [node_of[d] for d in table.device_ids])
    out = []
    for g in range(int(groups.max()) + 1):
        ids = np.flatnonzero(groups == g).tolist()
        devs = sorted({events[i].device_id for i in ids})
        w = Interval(int(start[ids].min()) - margin, int(end[ids].max()) + margin)
        out.append(Component(node_of[devs[0]], w, devs, ids, [events[i].device_id for i in ids]))
    return out


def _series(table, device: str, feature: str):
    s = table.device_slice(device)
    return table.times[s], table.columns[feature][s]


def prepare(table, events: Sequence[AnomalyEvent], features: Sequence[str] = CLUSTER_FEATURES,
            margin: int = 12 * DEFAULT_CADENCE) -> list[Component]:
    """Components with their per-feature similarity matrices (cutoff independent)."""
    comps = components(table, events, margin)
    for c in comps:
        if len(c.devices) < 2:
            continue
        for f in features:
            ser = [_Series(*_series(table, d, f)) for d in c.devices]
            c.similarity[f] = similarity_matrix(ser, c.window)
    return comps


@dataclass(frozen=True)
class _Series:
    times: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class ClusterReport:
    fiber_node: Optional[str]
    feature: str
    cluster_id: str
    members: tuple[str, ...]
    mean_similarity: Optional[float]
    fault_type: str

    def to_dict(self) -> dict:
        return {"fiber_node": self.fiber_node, "feature": self.feature, "cluster_id": self.cluster_id,
                "members": list(self.members), "mean_intra_similarity": self.mean_similarity,
                "fault_type": self.fault_type}


def _cluster_label(comp: Component, feature: str, leader: str) -> str:
    return f"{comp.fiber_node}:{comp.window.start}:{feature}:{leader}"


def type_components(comps: Sequence[Component], cutoffs: Mapping[str, float], min_group: int = 2,
                    combine: str = "any") -> tuple[dict[int, tuple[str, str]], list[ClusterReport]]:
    """(fault_type, cluster_id) per event index, and a report of every multi-device cluster."""
    typed: dict[int, tuple[str, str]] = {}
    reports: list[ClusterReport] = []
    for c in comps:
        parts = {f: average_linkage(c.devices, c.similarity[f], cut)
                 for f, cut in cutoffs.items() if f in c.similarity}
        types = classify_fault_type(c.devices, parts, min_group, combine)
        idx = {d: i for i, d in enumerate(c.devices)}
        cluster_of: dict[str, str] = {}
        for f, part in parts.items():
            for members in part.clusters():
                if len(members) < 2:
                    continue
                rows = [idx[m] for m in members]
                sub = c.similarity[f][np.ix_(rows, rows)]
                k = len(members)
                mean = float((sub.sum() - np.trace(sub)) / (k * (k - 1)))
                label = _cluster_label(c, f, members[0])
                kind = MAINTENANCE if k >= min_group else SERVICE
                reports.append(ClusterReport(c.fiber_node, f, label, tuple(members), mean, kind))
                if kind == MAINTENANCE:
                    for m in members:
                        if types[m] == MAINTENANCE:
                            cluster_of.setdefault(m, label)
        for i, d in zip(c.event_ids, c.event_devices):
            cid = cluster_of.get(d) or f"{c.fiber_node}:{c.window.start}:single:{d}"
            typed[i] = (types[d], cid)
    return typed, reports


def apply_types(events: Sequence[AnomalyEvent], typed: Mapping[int, tuple[str, str]]) -> list[AnomalyEvent]:
    return [replace(e, fault_type=typed[i][0], cluster_id=typed[i][1]) if i in typed else e
            for i, e in enumerate(events)]


def event_point_ranges(table, events: Sequence[AnomalyEvent]) -> tuple[np.ndarray, np.ndarray]:
    """Half-open point index range [lo, hi) of the collection points inside each event."""
    from .ingest import _KEY_SHIFT

    dev = np.array([table.device_index[e.device_id] for e in events], dtype=np.int64) * _KEY_SHIFT
    lo = np.searchsorted(table.keys, dev + np.array([e.start for e in events], dtype=np.int64), side="left")
    hi = np.searchsorted(table.keys, dev + np.array([e.end for e in events], dtype=np.int64), side="left")
    return lo, hi


def _range_mask(n: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    d = np.zeros(n + 1, dtype=np.int64)
    np.add.at(d, lo, 1)
    np.add.at(d, hi, -1)
    return np.cumsum(d[:-1]) > 0


def maintenance_trr(hold: np.ndarray, maint_counts: np.ndarray, maint_mask: np.ndarray,
                    service_mask: np.ndarray) -> float:
    """Maintenance-ticket rate in maintenance-typed periods over that in service-typed periods.

    A perfect split (maintenance tickets only in maintenance periods) is +inf;
    no exposure on either side, or no maintenance tickets at all, is undefined.
    """
    i_m = int(hold[maint_mask].sum())
    i_s = int(hold[service_mask].sum())
    k_m = int(maint_counts[maint_mask].sum())
    k_s = int(maint_counts[service_mask].sum())
    if i_m == 0 or i_s == 0 or k_m + k_s == 0:
        return UNDEFINED
    if k_s == 0:
        return math.inf
    return (k_m * i_s) / (i_m * k_s)


@dataclass
class SimilarityThresholds:
    cutoffs: dict[str, float]
    trr_m: float
    per_feature_trr: dict[str, float] = field(default_factory=dict)
    curves: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    p_value: Optional[float] = None

    def __post_init__(self):
        for f, s in self.cutoffs.items():
            if not -1.0 <= s <= 1.0:
                raise ValueError(f"cutoff for {f} outside [-1, 1]: {s}")

    @property
    def informative(self) -> Optional[bool]:
        return None if self.p_value is None else self.p_value <= 0.05

    def to_dict(self) -> dict:
        return {"format": "pnmfault-similarity/1", "cutoffs": dict(self.cutoffs), "trr_m": self.trr_m,
                "per_feature_trr": dict(self.per_feature_trr), "p_value": self.p_value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimilarityThresholds":
        return cls({str(k): float(v) for k, v in d["cutoffs"].items()}, float(d["trr_m"]),
                   {str(k): float(v) for k, v in (d.get("per_feature_trr") or {}).items()},
                   p_value=d.get("p_value"))


class _Evaluator:
    """Caches everything about a training set that does not depend on the cutoffs."""

    def __init__(self, table, events, comps, min_group, combine):
        self.table, self.events, self.comps = table, events, comps
        self.min_group, self.combine = min_group, combine
        self.lo, self.hi = event_point_ranges(table, events) if events else (np.zeros(0, int), np.zeros(0, int))

    def masks(self, cutoffs: Mapping[str, float]) -> tuple[np.ndarray, np.ndarray]:
        typed, _ = type_components(self.comps, cutoffs, self.min_group, self.combine)
        is_m = np.array([typed[i][0] == MAINTENANCE for i in range(len(self.events))], dtype=bool)
        n = len(self.table)
        return (_range_mask(n, self.lo[is_m], self.hi[is_m]),
                _range_mask(n, self.lo[~is_m], self.hi[~is_m]))

    def curve(self, feature: str, grid: Sequence[float], maint_counts: np.ndarray) -> list[tuple[float, float]]:
        return [(float(s), maintenance_trr(self.table.hold, maint_counts, *self.masks({feature: s})))
                for s in grid]


def _argmax(curve: Sequence[tuple[float, float]]) -> tuple[float, float]:
    # highest TRR_m; ties go to the smaller cutoff
    return min(curve, key=lambda c: (-c[1], c[0]))


def _maint_counts(table, tickets, flags: np.ndarray | None = None) -> np.ndarray:
    flag = tickets.maintenance if flags is None else flags[tickets.ticket]
    sel = (tickets.point >= 0) & flag
    return np.bincount(tickets.point[sel], minlength=len(table)).astype(np.int64)


def search_similarity_threshold(table, events: Sequence[AnomalyEvent], tickets,
                                grid: Sequence[float] = DEFAULT_GRID,
                                features: Sequence[str] = CLUSTER_FEATURES, margin: int = 12 * DEFAULT_CADENCE,
                                min_group: int = 2, combine: str = "any", n_permutations: int = 0,
                                seed: int = 0, comps: Sequence[Component] | None = None) -> SimilarityThresholds:
    """Per-feature cutoff maximising the maintenance ticketing-rate ratio on training data.

    With ``n_permutations`` > 0 the ticket maintenance flags are shuffled that
    many times and the observed maximum is compared with the shuffled maxima
    (``p_value``), flagging an uninformative calibration.
    """
    if not any(t.is_part_of_primary for t in tickets.tickets):
        raise NoMaintenanceTickets("no part-of-primary tickets to calibrate against")
    grid = sorted(set(float(s) for s in grid))
    comps = list(comps) if comps is not None else prepare(table, events, features, margin)
    ev = _Evaluator(table, list(events), comps, min_group, combine)
    counts = _maint_counts(table, tickets)
    curves = {f: ev.curve(f, grid, counts) for f in features}
    best = {f: _argmax(curves[f]) for f in features}
    cutoffs = {f: best[f][0] for f in features}
    combined = maintenance_trr(table.hold, counts, *ev.masks(cutoffs))
    p_value = None
    if n_permutations > 0:
        observed = max(b[1] for b in best.values())
        rng = np.random.default_rng(seed)
        flags = np.array([t.is_part_of_primary for t in tickets.tickets], dtype=bool)
        exceed = 0
        for _ in range(n_permutations):
            shuffled = _maint_counts(table, tickets, rng.permutation(flags))
            m = max(_argmax(ev.curve(f, grid, shuffled))[1] for f in features)
            exceed += m >= observed
        p_value = (1 + exceed) / (1 + n_permutations)
    return SimilarityThresholds(cutoffs, combined, {f: best[f][1] for f in features}, curves, p_value)


def diagnose(table, events: Sequence[AnomalyEvent], thresholds: SimilarityThresholds,
             margin: int = 12 * DEFAULT_CADENCE, min_group: int = 2, combine: str = "any",
             comps: Sequence[Component] | None = None) -> tuple[list[AnomalyEvent], list[ClusterReport]]:
    """Label every event maintenance or service and attach a cluster id."""
    comps = list(comps) if comps is not None else prepare(table, events, tuple(thresholds.cutoffs), margin)
    typed, reports = type_components(comps, thresholds.cutoffs, min_group, combine)
    return apply_types(events, typed), reports


def partition_of(events: Sequence[AnomalyEvent], devices: Iterable[str]) -> Partition:
    """Devices grouped by the cluster of their longest maintenance event; the rest are singletons."""
    p = Partition({d: f"single:{d}" for d in devices})
    best: dict[str, AnomalyEvent] = {}
    for e in events:
        if e.device_id in p and e.fault_type == MAINTENANCE and e.cluster_id:
            cur = best.get(e.device_id)
            if cur is None or e.duration > cur.duration:
                best[e.device_id] = e
    for d, e in best.items():
        p[d] = e.cluster_id
    return p
