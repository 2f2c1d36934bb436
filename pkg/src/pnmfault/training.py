"""Threshold learning by ticketing-rate ratio, feature selection, OR classifier."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import yaml

from .errors import ConfigError, DegenerateFeature, MissingFeature, NoTickets
from .features import FeatureSeries, FeatureSpec, all_specs, iter_features, metric_specs
from .model import HOUR, Interval, count_inside, total_duration

log = logging.getLogger(__name__)

LOW = "one-sided-low"
HIGH = "one-sided-high"
TWO_SIDED = "two-sided"
KINDS = (LOW, HIGH, TWO_SIDED)

# Sorts below every finite ratio.
UNDEFINED_TRR = float("-inf")

DETECTOR_FORMAT = "pnmfault-detector/1"
# Largest share of observed time a learned rule may label abnormal.
MAX_ABNORMAL_SHARE = 0.5


def default_kind(spec: FeatureSpec) -> str:
    """Which side of the threshold is abnormal for a feature family."""
    if spec.model == "var":
        return HIGH
    if spec.metric in ("snr", "mtr"):
        return LOW
    if spec.metric in ("tx_power", "rx_power"):
        return TWO_SIDED
    return HIGH


def kind_for(spec: FeatureSpec, overrides: Mapping[str, str] | None = None) -> str:
    """Resolve a direction; overrides are keyed by "metric-model" or "metric"."""
    overrides = overrides or {}
    for key in (f"{spec.metric}-{spec.model}", spec.metric):
        if key in overrides:
            kind = overrides[key]
            if kind not in KINDS:
                raise ConfigError(f"unknown threshold kind {kind!r} for {key}")
            return kind
    return default_kind(spec)


@dataclass(frozen=True)
class ThresholdRule:
    feature: str
    kind: str
    thr_low: Optional[float] = None
    thr_high: Optional[float] = None
    trr: float = math.nan

    def __post_init__(self):
        if self.kind == LOW:
            ok = self.thr_low is not None and self.thr_high is None
        elif self.kind == HIGH:
            ok = self.thr_high is not None and self.thr_low is None
        elif self.kind == TWO_SIDED:
            ok = self.thr_low is not None and self.thr_high is not None and self.thr_low < self.thr_high
        else:
            raise ValueError(f"unknown kind {self.kind!r}")
        if not ok:
            raise ValueError(f"bounds do not match kind {self.kind}: {self.thr_low}, {self.thr_high}")

    @property
    def spec(self) -> FeatureSpec:
        return FeatureSpec.parse(self.feature)

    def fires(self, values) -> np.ndarray:
        """Abnormal mask; NaN values never fire."""
        v = np.asarray(values, dtype=np.float64)
        if self.kind == LOW:
            return v < self.thr_low
        if self.kind == HIGH:
            return v > self.thr_high
        return (v < self.thr_low) | (v > self.thr_high)

    def to_dict(self) -> dict:
        return {"feature": self.feature, "kind": self.kind, "thr_low": self.thr_low,
                "thr_high": self.thr_high, "trr": self.trr}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ThresholdRule":
        f = lambda x: None if x is None else float(x)  # noqa: E731
        return cls(str(d["feature"]), str(d["kind"]), f(d.get("thr_low")), f(d.get("thr_high")),
                   float(d["trr"]))


class RateEstimate(NamedTuple):
    rate: float
    count: int
    hours: float

    @property
    def zero_duration(self) -> bool:
        return self.hours == 0

    def __float__(self) -> float:
        return self.rate


def ticketing_rate(periods: Sequence[Interval], ticket_times: Iterable[int]) -> RateEstimate:
    """Tickets per hour created inside ``periods``; zero-duration periods give rate 0 with the flag set."""
    seconds = total_duration(periods)
    k = count_inside(np.fromiter(ticket_times, dtype=np.int64), periods)
    if seconds == 0:
        return RateEstimate(0.0, k, 0.0)
    hours = seconds / HOUR
    return RateEstimate(k / hours, k, hours)


@dataclass(eq=False)
class Exposure:
    """Per-point holding time (seconds) and ticket count, the raw material of every rate."""

    hold: np.ndarray
    tickets: np.ndarray

    def __post_init__(self):
        self.hold = np.asarray(self.hold, dtype=np.int64)
        self.tickets = np.asarray(self.tickets, dtype=np.int64)

    @classmethod
    def from_table(cls, table, ticket_index, maintenance_only: bool = False) -> "Exposure":
        return cls(table.hold, ticket_index.point_counts(len(table), maintenance_only))

    @classmethod
    def from_series(cls, features: Sequence[FeatureSeries], tickets_by_device: Mapping[str, Sequence[int]],
                    max_gap: int | None = None) -> tuple["Exposure", np.ndarray]:
        """Exposure and concatenated values for per-device feature series."""
        holds, counts, values = [], [], []
        for f in features:
            t = np.asarray(f.times, dtype=np.int64)
            h = np.zeros(t.size, dtype=np.int64)
            h[:-1] = np.diff(t)
            if max_gap is not None:
                h[h > max_gap] = 0
            tk = np.sort(np.asarray(tickets_by_device.get(f.device_id, []), dtype=np.int64))
            i = np.searchsorted(t, tk, side="right") - 1
            ok = (i >= 0)
            ok[ok] &= tk[ok] < t[i[ok]] + h[i[ok]]
            holds.append(h)
            counts.append(np.bincount(i[ok], minlength=t.size))
            values.append(np.asarray(f.values, dtype=np.float64))
        return cls(np.concatenate(holds), np.concatenate(counts)), np.concatenate(values)


def _ratio(k_a, t_a, k_n, t_n):
    """Vectorised (k_a/t_a)/(k_n/t_n) with undefined cases mapped to UNDEFINED_TRR."""
    k_a, t_a, k_n, t_n = (np.asarray(x, dtype=np.float64) for x in (k_a, t_a, k_n, t_n))
    ok = (t_a > 0) & (t_n > 0) & (k_n > 0)
    num = k_a * t_n
    den = np.where(ok, t_a * k_n, 1.0)
    return np.where(ok, num / den, UNDEFINED_TRR)


def trr_from_mask(abnormal: np.ndarray, exposure: Exposure) -> float:
    """Ticketing-rate ratio of an arbitrary abnormal/normal split of the points."""
    abnormal = np.asarray(abnormal, dtype=bool)
    t_a = int(exposure.hold[abnormal].sum())
    k_a = int(exposure.tickets[abnormal].sum())
    t_n = int(exposure.hold.sum()) - t_a
    k_n = int(exposure.tickets.sum()) - k_a
    return float(_ratio(k_a, t_a, k_n, t_n))


def trr_for_threshold(values: np.ndarray, exposure: Exposure, rule: ThresholdRule) -> float:
    """Ratio of abnormal-time to normal-time ticketing rate under ``rule``."""
    return trr_from_mask(rule.fires(values), exposure)


def candidate_grid(values: np.ndarray, grid_steps: int) -> np.ndarray:
    """Distinct observed values at evenly spaced empirical quantiles."""
    if grid_steps < 2:
        raise ValueError("grid_steps must be >= 2")
    v = values[np.isfinite(values)]
    if v.size == 0:
        return v
    # the "lower" empirical quantile, by direct indexing: np.quantile gets slow for very fine grids
    idx = np.floor(np.linspace(0.0, 1.0, grid_steps) * (v.size - 1)).astype(np.int64)
    return np.unique(np.sort(v)[idx])


@dataclass(frozen=True)
class _Sweep:
    thr_low: np.ndarray
    thr_high: np.ndarray
    trr: np.ndarray
    t_a: np.ndarray


def _sweep(values: np.ndarray, exposure: Exposure, kind: str, grid: np.ndarray) -> _Sweep:
    fin = np.isfinite(values)
    order = np.argsort(values[fin], kind="stable")
    v = values[fin][order]
    h = np.concatenate([[0], np.cumsum(exposure.hold[fin][order])])
    k = np.concatenate([[0], np.cumsum(exposure.tickets[fin][order])])
    h_tot = int(exposure.hold.sum())
    k_tot = int(exposure.tickets.sum())
    nan = np.full(grid.size, np.nan)
    if kind == LOW:
        i = np.searchsorted(v, grid, side="left")
        t_a, k_a = h[i], k[i]
        lo, hi = grid, nan
    elif kind == HIGH:
        i = np.searchsorted(v, grid, side="right")
        t_a, k_a = h[-1] - h[i], k[-1] - k[i]
        lo, hi = nan, grid
    else:
        a, b = np.triu_indices(grid.size, k=1)
        lo, hi = grid[a], grid[b]
        il = np.searchsorted(v, lo, side="left")
        ih = np.searchsorted(v, hi, side="right")
        t_a = h[il] + h[-1] - h[ih]
        k_a = k[il] + k[-1] - k[ih]
    trr = _ratio(k_a, t_a, k_tot - k_a, h_tot - t_a)
    return _Sweep(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float), trr, np.asarray(t_a))


def _best(sweep: _Sweep, max_abnormal: float = math.inf) -> int:
    # max TRR among feasible candidates, then smallest abnormal duration, then first candidate
    trr = np.where(sweep.t_a <= max_abnormal, sweep.trr, UNDEFINED_TRR)
    order = np.lexsort((np.arange(trr.size), sweep.t_a, -trr))
    return int(order[0])


def learn_threshold(values: np.ndarray, exposure: Exposure, kind: str, grid_steps: int = 200,
                    feature: str = "feature", max_abnormal_share: float = MAX_ABNORMAL_SHARE) -> ThresholdRule:
    """Threshold(s) maximising the ticketing-rate ratio over an empirical-quantile grid.

    Candidates labelling more than ``max_abnormal_share`` of the observed time
    abnormal are not eligible; otherwise a rule whose normal side is a sliver
    of time can win on the noise of a handful of tickets.
    """
    values = np.asarray(values, dtype=np.float64)
    grid = candidate_grid(values, grid_steps)
    if grid.size < 2:
        raise DegenerateFeature(f"{feature}: constant or empty feature")
    sweep = _sweep(values, exposure, kind, grid)
    j = _best(sweep, max_abnormal_share * float(exposure.hold.sum()))
    trr = float(sweep.trr[j]) if sweep.t_a[j] <= max_abnormal_share * float(exposure.hold.sum()) else UNDEFINED_TRR
    if not trr > 0:
        raise DegenerateFeature(f"{feature}: no threshold with a positive ticketing rate ratio")
    lo = None if math.isnan(sweep.thr_low[j]) else float(sweep.thr_low[j])
    hi = None if math.isnan(sweep.thr_high[j]) else float(sweep.thr_high[j])
    return ThresholdRule(feature, kind, lo, hi, trr)


def threshold_sweep(values: np.ndarray, exposure: Exposure, kind: str, grid_steps: int = 200):
    """All one-sided candidates and their TRR, as (grid, trr); for diagnostics and tests."""
    if kind == TWO_SIDED:
        raise ValueError("threshold_sweep covers one-sided kinds only")
    grid = candidate_grid(np.asarray(values, dtype=np.float64), grid_steps)
    s = _sweep(np.asarray(values, dtype=np.float64), exposure, kind, grid)
    return grid, s.trr


def select_features(rules: Iterable[ThresholdRule], n_final: int = 5) -> list[ThresholdRule]:
    """Best variant per (metric, model), best two models per metric, best ``n_final`` overall."""
    key = lambda r: (-r.trr, r.feature)  # noqa: E731
    stage1: dict[tuple[str, str], ThresholdRule] = {}
    for r in rules:
        if not (math.isfinite(r.trr) and r.trr > 0):
            continue
        s = r.spec
        cur = stage1.get((s.metric, s.model))
        if cur is None or key(r) < key(cur):
            stage1[(s.metric, s.model)] = r
    per_metric: dict[str, list[ThresholdRule]] = {}
    for (metric, _), r in stage1.items():
        per_metric.setdefault(metric, []).append(r)
    stage2 = [r for rs in per_metric.values() for r in sorted(rs, key=key)[:2]]
    return sorted(stage2, key=key)[:n_final]


def classify_point(rules: Sequence[ThresholdRule], feature_values: Mapping[str, float]) -> bool:
    """True (abnormal) when any rule fires on the given feature values."""
    abnormal = False
    for r in rules:
        if r.feature not in feature_values:
            raise MissingFeature(r.feature)
        abnormal |= bool(r.fires(feature_values[r.feature]))
    return abnormal


def rule_masks(table, rules: Sequence[ThresholdRule]) -> dict[str, np.ndarray]:
    """Per-rule firing masks over every point of a ``SeriesTable``."""
    specs = sorted({r.spec for r in rules})
    values = {s.name: v for s, v in iter_features(table.times, table.columns, table.offsets, specs)}
    return {r.feature: r.fires(values[r.feature]) for r in rules}


def classify(table, rules: Sequence[ThresholdRule]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """OR-combined abnormal labels for every point, plus the per-rule masks."""
    masks = rule_masks(table, rules)
    abnormal = np.zeros(len(table), dtype=bool)
    for m in masks.values():
        abnormal |= m
    return abnormal, masks


@dataclass
class TrainedDetector:
    rules: list[ThresholdRule]
    window_x: int = 8
    window_y: int = 12
    training_summary: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.window_x <= self.window_y:
            raise ConfigError(f"need 1 <= x <= y, got x={self.window_x}, y={self.window_y}")

    def to_dict(self) -> dict:
        return {
            "format": DETECTOR_FORMAT,
            "window": {"x": self.window_x, "y": self.window_y},
            "rules": [r.to_dict() for r in self.rules],
            "training_summary": [{"feature": k, "trr": v} for k, v in self.training_summary.items()],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainedDetector":
        if d.get("format") != DETECTOR_FORMAT:
            raise ConfigError(f"not a detector document: format={d.get('format')!r}")
        return cls([ThresholdRule.from_dict(r) for r in d["rules"]], int(d["window"]["x"]),
                   int(d["window"]["y"]),
                   {str(e["feature"]): float(e["trr"]) for e in d.get("training_summary") or []})

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def loads(cls, text: str) -> "TrainedDetector":
        return cls.from_dict(yaml.safe_load(text))


# -- orchestration ---------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(table, exposure, grid_steps, overrides, max_abnormal_share):
    _WORKER.update(table=table, exposure=exposure, grid_steps=grid_steps, overrides=overrides,
                   share=max_abnormal_share)


def _learn_metric(metric: str) -> list[ThresholdRule]:
    w = _WORKER
    table = w["table"]
    out = []
    for spec, values in iter_features(table.times, table.columns, table.offsets, metric_specs(metric)):
        try:
            out.append(learn_threshold(values, w["exposure"], kind_for(spec, w["overrides"]),
                                       w["grid_steps"], spec.name, w["share"]))
        except DegenerateFeature as exc:
            log.info("skipping %s", exc)
    return out


def learn_all(table, exposure: Exposure, metrics: Sequence[str], grid_steps: int = 200,
              overrides: Mapping[str, str] | None = None, jobs: int = 1,
              max_abnormal_share: float = MAX_ABNORMAL_SHARE) -> list[ThresholdRule]:
    """One learned rule per non-degenerate feature; order follows ``all_specs``."""
    metrics = [m for m in metrics if m in table.columns]
    args = (table, exposure, grid_steps, dict(overrides or {}), max_abnormal_share)
    if jobs > 1 and len(metrics) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=args) as ex:
            parts = list(ex.map(_learn_metric, metrics))
    else:
        _init_worker(*args)
        try:
            parts = [_learn_metric(m) for m in metrics]
        finally:
            _WORKER.clear()
    order = {s.name: i for i, s in enumerate(all_specs(metrics))}
    return sorted((r for p in parts for r in p), key=lambda r: order[r.feature])


def train_detector(table, ticket_index, metrics: Sequence[str], n_final: int = 5, grid_steps: int = 200,
                   overrides: Mapping[str, str] | None = None, window_x: int = 8, window_y: int = 12,
                   jobs: int = 1, max_abnormal_share: float = MAX_ABNORMAL_SHARE) -> TrainedDetector:
    exposure = Exposure.from_table(table, ticket_index)
    if exposure.tickets.sum() == 0:
        raise NoTickets("no network-related tickets fall inside the PNM observation period")
    rules = learn_all(table, exposure, metrics, grid_steps, overrides, jobs, max_abnormal_share)
    selected = select_features(rules, n_final)
    if not selected:
        raise DegenerateFeature("no feature produced a usable threshold")
    return TrainedDetector(selected, window_x, window_y, {r.feature: r.trr for r in rules})
