"""Time-series features: trailing average, WMA, EWMA, WMA difference, variance.

Windows are expressed in days and resolved against timestamps: the window at
point ``i`` holds every point of the same device with ``t_i - win*86400 < t <= t_i``.
All kernels work on flattened multi-device arrays (see ``SeriesTable``) and
are strictly causal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .model import DAY, DeviceSeries

MODELS = ("avg", "wma", "wma_diff", "var", "ewma")
WINDOW_DAYS = tuple(range(1, 8))
LAMBDAS = tuple(round(0.1 * k, 1) for k in range(1, 10))

_MODEL_TOKEN = {"wma_diff": "wma-diff"}
_TOKEN_MODEL = {v: k for k, v in _MODEL_TOKEN.items()}

# rows per gather block; bounds memory at roughly CHUNK * max_window * 8 bytes
CHUNK = 65_536


@dataclass(frozen=True, order=True)
class FeatureSpec:
    metric: str
    model: str
    window_days: Optional[int] = None
    lam: Optional[float] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.model == "ewma":
            if self.lam is None or self.window_days is not None or not 0 < self.lam < 1:
                raise ValueError("ewma takes lam in (0, 1) and no window")
        elif self.window_days is None or self.lam is not None or self.window_days < 1:
            raise ValueError(f"{self.model} takes a window of >= 1 day and no lambda")

    @property
    def name(self) -> str:
        param = f"{self.lam:.1f}" if self.model == "ewma" else str(self.window_days)
        return f"{self.metric}-{_MODEL_TOKEN.get(self.model, self.model)}-{param}"

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, name: str) -> "FeatureSpec":
        metric, *model_parts, param = name.split("-")
        token = "-".join(model_parts)
        model = _TOKEN_MODEL.get(token, token)
        if model == "ewma":
            return cls(metric, model, lam=float(param))
        return cls(metric, model, window_days=int(param))


def metric_specs(metric: str) -> list[FeatureSpec]:
    """The 37 feature variants of one metric."""
    specs = [FeatureSpec(metric, m, window_days=w)
             for m in ("avg", "wma", "wma_diff", "var") for w in WINDOW_DAYS]
    specs += [FeatureSpec(metric, "ewma", lam=lam) for lam in LAMBDAS]
    return specs


def all_specs(metrics: Sequence[str]) -> list[FeatureSpec]:
    return [s for m in metrics for s in metric_specs(m)]


@dataclass(frozen=True, eq=False)
class FeatureSeries:
    spec: FeatureSpec
    device_id: str
    times: np.ndarray
    values: np.ndarray

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.times.tolist(), self.values.tolist()))


# -- flat-array kernels --------------------------------------------------------

def _single(times) -> np.ndarray:
    return np.array([0, len(times)], dtype=np.int64)


def window_starts(times: np.ndarray, offsets: np.ndarray, win_seconds: int) -> np.ndarray:
    """Index of the oldest point inside each point's trailing window."""
    times = np.asarray(times, dtype=np.int64)
    starts = np.empty(times.size, dtype=np.int64)
    for k in range(offsets.size - 1):
        a, b = int(offsets[k]), int(offsets[k + 1])
        if b > a:
            t = times[a:b]
            starts[a:b] = a + np.searchsorted(t, t - win_seconds, side="right")
    return starts


def window_stats(times: np.ndarray, values: np.ndarray, offsets: np.ndarray | None,
                 win_days: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Trailing (average, WMA, variance) over a ``win_days`` time window.

    WMA weights are n, n-1, ..., 1 from newest to oldest and are normalised by
    their sum n(n+1)/2. Variance is the population variance around the window
    average, computed in two passes.
    """
    values = np.asarray(values, dtype=np.float64)
    offsets = _single(times) if offsets is None else offsets
    n = values.size
    avg = np.empty(n)
    wma = np.empty(n)
    var = np.empty(n)
    if n == 0:
        return avg, wma, var
    idx = np.arange(n, dtype=np.int64)
    counts = idx - window_starts(times, offsets, win_days * DAY) + 1
    for a in range(0, n, CHUNK):
        b = min(n, a + CHUNK)
        cnt = counts[a:b]
        width = int(cnt.max())
        lag = np.arange(width, dtype=np.int64)
        valid = lag[None, :] < cnt[:, None]
        src = np.where(valid, idx[a:b, None] - lag[None, :], 0)
        vals = np.where(valid, values[src], 0.0)
        c = cnt.astype(np.float64)
        mean = vals.sum(axis=1) / c
        w = np.where(valid, (cnt[:, None] - lag[None, :]).astype(np.float64), 0.0)
        wma[a:b] = (w * vals).sum(axis=1) / (c * (c + 1.0) / 2.0)
        dev = np.where(valid, vals - mean[:, None], 0.0)
        var[a:b] = (dev * dev).sum(axis=1) / c
        avg[a:b] = mean
    return avg, wma, var


def ewma_values(values: np.ndarray, offsets: np.ndarray | None, lam: float) -> np.ndarray:
    """EWMA_1 = V_1, EWMA_i = lam*V_i + (1-lam)*EWMA_{i-1}, restarted per device."""
    values = np.asarray(values, dtype=np.float64)
    offsets = _single(values) if offsets is None else offsets
    out = np.empty_like(values)
    for k in range(offsets.size - 1):
        a, b = int(offsets[k]), int(offsets[k + 1])
        if b > a:
            v = values[a:b]
            out[a:b], _ = lfilter([lam], [1.0, lam - 1.0], v, zi=[(1.0 - lam) * v[0]])
    return out


def iter_features(times: np.ndarray, columns: Mapping[str, np.ndarray], offsets: np.ndarray,
                  specs: Iterable[FeatureSpec]) -> Iterator[tuple[FeatureSpec, np.ndarray]]:
    """Yield ``(spec, values)`` for every spec, sharing work between specs on one window."""
    pending: dict[tuple, list[FeatureSpec]] = {}
    for s in specs:
        key = (s.metric, s.window_days) if s.model != "ewma" else (s.metric, "ewma", s.lam)
        pending.setdefault(key, []).append(s)
    for key, group in pending.items():
        metric = key[0]
        v = columns[metric]
        if key[1] == "ewma":
            out = ewma_values(v, offsets, key[2])
            for s in group:
                yield s, out
            continue
        avg, wma, var = window_stats(times, v, offsets, key[1])
        by_model = {"avg": avg, "wma": wma, "wma_diff": v - wma, "var": var}
        for s in group:
            yield s, by_model[s.model]


def compute_feature(table, spec: FeatureSpec) -> np.ndarray:
    """Values of one feature at every point of a ``SeriesTable``."""
    return next(iter_features(table.times, table.columns, table.offsets, [spec]))[1]


# -- per-device API ------------------------------------------------------------

def _wrap(series: DeviceSeries, spec: FeatureSpec, values: np.ndarray) -> FeatureSeries:
    return FeatureSeries(spec, series.device_id, series.times, values)


def avg(series: DeviceSeries, win: int) -> FeatureSeries:
    a, _, _ = window_stats(series.times, series.values, None, win)
    return _wrap(series, FeatureSpec(series.metric_name, "avg", window_days=win), a)


def wma(series: DeviceSeries, win: int) -> FeatureSeries:
    _, w, _ = window_stats(series.times, series.values, None, win)
    return _wrap(series, FeatureSpec(series.metric_name, "wma", window_days=win), w)


def wma_diff(series: DeviceSeries, win: int) -> FeatureSeries:
    _, w, _ = window_stats(series.times, series.values, None, win)
    return _wrap(series, FeatureSpec(series.metric_name, "wma_diff", window_days=win), series.values - w)


def variance(series: DeviceSeries, win: int) -> FeatureSeries:
    _, _, v = window_stats(series.times, series.values, None, win)
    return _wrap(series, FeatureSpec(series.metric_name, "var", window_days=win), v)


def ewma(series: DeviceSeries, lam: float) -> FeatureSeries:
    return _wrap(series, FeatureSpec(series.metric_name, "ewma", lam=lam),
                 ewma_values(series.values, None, lam))


def generate_all(table, metrics: Sequence[str]) -> list[FeatureSeries]:
    """Every feature of every metric for every device of a ``SeriesTable``."""
    if not metrics:
        raise ValueError("metrics must be non-empty")
    out = []
    for spec, values in iter_features(table.times, table.columns, table.offsets, all_specs(metrics)):
        for d in table.device_ids:
            s = table.device_slice(d)
            out.append(FeatureSeries(spec, d, table.times[s], values[s]))
    return out


def write_feature_csv(features: Iterable[FeatureSeries], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device", "ts", "feature_name", "value"])
        for f in features:
            for t, v in zip(f.times.tolist(), f.values.tolist()):
                w.writerow([f.device_id, t, f.name, repr(v)])
