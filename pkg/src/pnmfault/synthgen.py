"""Seeded generator of PNM datasets with planted faults and Poisson ticket streams.

Every device reports on a jittered fixed cadence. Level metrics are Gaussian
around a baseline; counters are negative-binomial increments that are
cumulated (with occasional reboots) so that ingestion has to difference them
back. During a fault the affected devices get additive level deltas and
multiplied counter rates. A maintenance fault applies one shared waveform to
a group of devices of a fiber node plus a little independent noise; a service
fault gives a single device its own waveform.

Tickets arrive as a Poisson process with rate ``lambda_n`` per device-hour at
all times plus ``lambda_a`` during the device's faults.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigInvalid
from .ingest import PNM_SCHEMA, table_from_arrays, write_ticket_csv
from .model import (
    COUNTER_FIELDS,
    DAY,
    HOUR,
    MAINTENANCE,
    METRIC_FIELDS,
    METRICS,
    SERVICE,
    DeviceInfo,
    Directory,
    PnmRecord,
    Ticket,
)

LEVEL_METRICS = ("snr", "tx_power", "rx_power", "mtr")
COUNTER_NAMES = ("unerrored", "corrected", "uncorrectable", "t3_timeouts", "t4_timeouts")

# metric -> (mean, sd); counters give the mean increment per collection interval
DEFAULT_BASELINE: dict[str, tuple[float, float]] = {
    "snr": (36.0, 0.5),
    "tx_power": (42.0, 0.5),
    "rx_power": (0.0, 0.5),
    "mtr": (30.0, 0.5),
    "unerrored": (100_000.0, 0.0),
    "corrected": (40.0, 0.0),
    "uncorrectable": (2.0, 0.0),
    "t3_timeouts": (0.1, 0.0),
    "t4_timeouts": (0.02, 0.0),
}
# level metrics: additive delta; counters: rate multiplier
DEFAULT_DELTAS: dict[str, float] = {
    "snr": -8.0,
    "tx_power": 6.0,
    "rx_power": -3.0,
    "mtr": -8.0,
    "corrected": 20.0,
    "uncorrectable": 30.0,
    "t3_timeouts": 20.0,
    "t4_timeouts": 20.0,
}

NETWORK_KEYWORDS = ("Data Down", "Noisy Line", "Slow Speed")
OTHER_REASONS = (("Billing", "Billing question"), ("Sales", "Plan upgrade"), ("Account", "Address change"))
AR_COEF = 0.5


@dataclass(frozen=True)
class FaultSpec:
    """One planted fault: a set of devices impaired over ``[start, end)``."""

    type: str
    fiber_node: str
    devices: tuple[str, ...]
    start: int
    end: int
    deltas: Optional[Mapping[str, float]] = None
    group_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if self.type not in (MAINTENANCE, SERVICE):
            raise ConfigInvalid(f"fault type must be {MAINTENANCE!r} or {SERVICE!r}, got {self.type!r}")
        if self.type == MAINTENANCE and len(set(self.devices)) < 2:
            raise ConfigInvalid("a maintenance fault needs at least 2 devices")
        if self.type == SERVICE and len(self.devices) != 1:
            raise ConfigInvalid("a service fault affects exactly 1 device")
        if self.end <= self.start:
            raise ConfigInvalid(f"empty fault interval [{self.start}, {self.end})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["devices"] = list(self.devices)
        d["deltas"] = dict(self.deltas) if self.deltas else None
        return d


@dataclass(frozen=True)
class RandomFaults:
    """Recipe for a seeded random fault schedule."""

    n_maintenance: int = 0
    n_service: int = 0
    group_size: tuple[int, int] = (3, 6)
    duration_hours: tuple[float, float] = (24.0, 72.0)
    separation_hours: float = 48.0
    exclusive: bool = False


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_fiber_nodes: int = 2
    devices_per_node: int = 10
    duration_days: float = 14.0
    cadence_hours: float = 4.0
    start_time: int = 1_577_836_800
    jitter_seconds: int = 300
    missing_prob: float = 0.0
    channels: tuple[int, ...] = (36_000_000,)
    channel_sd: float = 0.2
    baseline: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BASELINE))
    deltas: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_DELTAS))
    waveform_sd: float = 0.3
    group_waveform_sd: float = 1.2
    group_noise: float = 0.2
    counter_dispersion: float = 5.0
    reset_prob: float = 0.002
    emit_mtr: bool = True
    faults: tuple[FaultSpec, ...] = ()
    random_faults: Optional[RandomFaults] = None
    lambda_n: float = 0.002
    lambda_a: float = 0.018
    ticket_process: str = "poisson"
    maintenance_ticket_prob: float = 0.8
    service_flag_prob: float = 0.02
    dispatch_prob: float = 0.5
    noise_ticket_rate: float = 0.001
    lifetime_median_hours: float = 24.0
    lifetime_sigma: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(sorted(int(c) for c in self.channels)))
        object.__setattr__(self, "faults", tuple(self.faults))
        object.__setattr__(self, "baseline", {**DEFAULT_BASELINE, **{k: tuple(v) for k, v in self.baseline.items()}})
        object.__setattr__(self, "deltas", {**DEFAULT_DELTAS, **dict(self.deltas)})
        self._validate()

    def _validate(self):
        def bad(msg):
            raise ConfigInvalid(msg)

        if not self.lambda_n > 0:
            bad(f"lambda_n must be > 0, got {self.lambda_n}")
        if not self.lambda_a >= 0:
            bad(f"lambda_a must be >= 0, got {self.lambda_a}")
        if self.n_fiber_nodes < 1 or self.devices_per_node < 1:
            bad("need at least one fiber node and one device per node")
        if not self.duration_days > 0 or not self.cadence_hours > 0:
            bad("duration_days and cadence_hours must be positive")
        if not 0 <= self.jitter_seconds < self.cadence * 0.5:
            bad("jitter_seconds must be in [0, cadence / 2)")
        if not self.channels:
            bad("at least one channel is required")
        if self.ticket_process not in ("poisson", "uniform"):
            bad(f"ticket_process must be 'poisson' or 'uniform', got {self.ticket_process!r}")
        for name in ("missing_prob", "maintenance_ticket_prob", "service_flag_prob", "dispatch_prob", "reset_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad(f"{name} must be a probability")
        unknown = (set(self.baseline) | set(self.deltas)) - set(METRICS)
        if unknown:
            bad(f"unknown metrics {sorted(unknown)}")
        if self.waveform_sd < 0 or self.group_waveform_sd < 0 or self.group_noise < 0:
            bad("waveform and group-noise sds must be >= 0")
        for m, (_, sd) in self.baseline.items():
            if sd < 0:
                bad(f"negative baseline sd for {m}")
        for m in COUNTER_NAMES:
            if m in self.deltas and self.deltas[m] < 0:
                bad(f"counter multiplier for {m} must be >= 0")
        known = set(self.device_ids)
        nodes = self.node_of
        for f in self.faults:
            missing = set(f.devices) - known
            if missing:
                bad(f"fault references unknown devices {sorted(missing)}")
            if any(nodes[d] != f.fiber_node for d in f.devices):
                bad(f"fault {f.group_id or f.start} spans devices outside fiber node {f.fiber_node}")

    @property
    def cadence(self) -> int:
        return int(round(self.cadence_hours * HOUR))

    @property
    def n_slots(self) -> int:
        return int(self.duration_days * DAY // self.cadence)

    @property
    def end_time(self) -> int:
        return self.start_time + self.n_slots * self.cadence

    @property
    def device_ids(self) -> list[str]:
        return [f"cm-{k:05d}" for k in range(self.n_fiber_nodes * self.devices_per_node)]

    @property
    def node_of(self) -> dict[str, str]:
        return {d: f"fn-{k // self.devices_per_node:03d}" for k, d in enumerate(self.device_ids)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["baseline"] = {k: list(v) for k, v in self.baseline.items()}
        d["deltas"] = dict(self.deltas)
        d["faults"] = [f.to_dict() for f in self.faults]
        if self.random_faults is not None:
            d["random_faults"] = {k: list(v) if isinstance(v, tuple) else v
                                  for k, v in asdict(self.random_faults).items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SynthConfig":
        d = dict(d)
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown synth keys {sorted(unknown)}")
        try:
            if "faults" in d:
                d["faults"] = tuple(FaultSpec(**{**f, "devices": tuple(f["devices"])}) for f in d["faults"] or ())
            if d.get("random_faults") is not None:
                rf = dict(d["random_faults"])
                for k in ("group_size", "duration_hours"):
                    if k in rf:
                        rf[k] = tuple(rf[k])
                d["random_faults"] = RandomFaults(**rf)
            if "channels" in d:
                d["channels"] = tuple(d["channels"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc


def random_schedule(cfg: SynthConfig, recipe: RandomFaults, rng: np.random.Generator) -> list[FaultSpec]:
    """Faults placed uniformly at random, aligned to the nominal collection slots.

    No device gets two faults closer than ``separation_hours`` (or more than one
    fault at all when ``exclusive``).
    """
    cad = cfg.cadence
    node_of = cfg.node_of
    by_node: dict[str, list[str]] = {}
    for d in cfg.device_ids:
        by_node.setdefault(node_of[d], []).append(d)
    nodes = sorted(by_node)
    busy: dict[str, list[tuple[int, int]]] = {d: [] for d in cfg.device_ids}
    sep = int(recipe.separation_hours * HOUR)
    lo_slots = max(1, int(math.ceil(recipe.duration_hours[0] * HOUR / cad)))
    hi_slots = max(lo_slots, int(recipe.duration_hours[1] * HOUR // cad))
    if hi_slots >= cfg.n_slots:
        raise ConfigInvalid("fault durations do not fit in the simulated period")

    def free(d, a, b):
        if recipe.exclusive and busy[d]:
            return False
        return all(b + sep <= s or e + sep <= a for s, e in busy[d])

    def interval():
        k = int(rng.integers(lo_slots, hi_slots + 1))
        s = int(rng.integers(0, cfg.n_slots - k + 1))
        return cfg.start_time + s * cad, cfg.start_time + (s + k) * cad

    out: list[FaultSpec] = []
    for g in range(recipe.n_maintenance):
        for _ in range(1000):
            node = nodes[int(rng.integers(len(nodes)))]
            size = int(rng.integers(recipe.group_size[0], recipe.group_size[1] + 1))
            a, b = interval()
            cand = [d for d in by_node[node] if free(d, a, b)]
            if len(cand) >= max(2, size):
                pick = sorted(rng.choice(cand, size=max(2, size), replace=False).tolist())
                break
        else:
            raise ConfigInvalid(f"could not place maintenance fault {g}; too many faults for the fleet")
        for d in pick:
            busy[d].append((a, b))
        out.append(FaultSpec(MAINTENANCE, node, tuple(pick), a, b, group_id=f"m{g:04d}"))
    devices = cfg.device_ids
    for k in range(recipe.n_service):
        for _ in range(1000):
            d = devices[int(rng.integers(len(devices)))]
            a, b = interval()
            if free(d, a, b):
                break
        else:
            raise ConfigInvalid(f"could not place service fault {k}; too many faults for the fleet")
        busy[d].append((a, b))
        out.append(FaultSpec(SERVICE, node_of[d], (d,), a, b, group_id=f"s{k:04d}"))
    return out


def _ar_shape(rng: np.random.Generator, n: int, sd: float) -> np.ndarray:
    """max(0, 1 + sd * unit-variance AR(1) noise); a constant step when ``sd`` is 0.

    The floor keeps a fault from ever improving a metric.
    """
    if sd == 0 or n == 0:
        return np.ones(n)
    e = rng.standard_normal(n) * math.sqrt(1 - AR_COEF ** 2)
    a = np.empty(n)
    a[0] = rng.standard_normal()
    for k in range(1, n):
        a[k] = AR_COEF * a[k - 1] + e[k]
    return np.maximum(0.0, 1.0 + sd * a)


def _cumulate(inc: np.ndarray, reset: np.ndarray) -> np.ndarray:
    """Cumulative counter restarting at each reset point (the reset point keeps its own increment)."""
    cs = np.cumsum(inc)
    base = np.where(reset, cs - inc, 0)
    return cs - np.maximum.accumulate(base)


@dataclass
class SynthDataset:
    """Generated rows (sorted by device, time, channel), tickets and planted truth."""

    config: SynthConfig
    device_ids: list[str]
    directory: Directory
    dev: np.ndarray
    ts: np.ndarray
    chan: np.ndarray
    raw: dict[str, np.ndarray]
    fault_of_row: np.ndarray
    tickets: list[Ticket]
    faults: list[FaultSpec]

    def __len__(self) -> int:
        return int(self.ts.size)

    def records(self) -> list[PnmRecord]:
        cols = {k: v.tolist() for k, v in self.raw.items()}
        info = self.directory.devices
        out = []
        for i, (d, t, c) in enumerate(zip(self.dev.tolist(), self.ts.tolist(), self.chan.tolist())):
            dev = self.device_ids[d]
            out.append(PnmRecord(dev, info[dev].account_id, t, c,
                                 *(cols[f][i] for f in ("snr_db", "tx_power_dbmv", "rx_power_dbmv",
                                                        *COUNTER_FIELDS)),
                                 mtr_db=cols["mtr_db"][i] if "mtr_db" in cols else None,
                                 fiber_node=info[dev].fiber_node))
        return out

    def table(self, metrics: Sequence[str] = METRICS, max_gap: int = DAY):
        """Same result as ``build_table(self.records())`` without materialising records."""
        raw = {}
        for m in metrics:
            f = METRIC_FIELDS[m]
            raw[m] = self.raw[f] if f in self.raw else np.full(self.ts.size, np.nan)
        return table_from_arrays(list(self.device_ids), self.dev, self.ts, self.chan, raw,
                                 self.directory, max_gap)

    def point_faults(self, table) -> np.ndarray:
        """Planted fault index (-1 for none) of every point of ``table``."""
        shift = np.int64(1) << np.int64(40)
        keys = self.dev.astype(np.int64) * shift + self.ts
        own = {d: k for k, d in enumerate(self.device_ids)}
        pdev = np.array([own[d] for d in table.device_ids], dtype=np.int64)[table.point_device]
        rows = np.searchsorted(keys, pdev * shift + table.times, side="left")
        return self.fault_of_row[rows]

    @property
    def fault_fraction(self) -> float:
        """Share of device-time covered by planted faults."""
        busy = sum((f.end - f.start) * len(f.devices) for f in self.faults)
        return busy / (len(self.device_ids) * (self.config.end_time - self.config.start_time))

    def ground_truth(self) -> dict:
        per_device: dict[str, list] = {d: [] for d in self.device_ids}
        for k, f in enumerate(self.faults):
            for d in f.devices:
                per_device[d].append({"fault": k, "type": f.type, "group_id": f.group_id,
                                      "start": f.start, "end": f.end})
        return {"seed": self.config.seed,
                "faults": [{"fault": k, **f.to_dict()} for k, f in enumerate(self.faults)],
                "devices": {d: sorted(v, key=lambda x: x["start"]) for d, v in per_device.items() if v}}

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"pnm": out / "pnm.csv", "tickets": out / "tickets.csv", "ground_truth": out / "ground_truth.json"}
        self._write_pnm(paths["pnm"])
        write_ticket_csv(self.tickets, paths["tickets"])
        paths["ground_truth"].write_text(json.dumps(self.ground_truth(), indent=1, sort_keys=True) + "\n")
        return paths

    def _write_pnm(self, path: Path) -> None:
        info = self.directory.devices
        keys = list(PNM_SCHEMA)
        if "mtr_db" not in self.raw:
            keys.remove("mtr_db")
        n = self.ts.size
        dev_names = [self.device_ids[d] for d in self.dev.tolist()]
        cols: dict[str, list] = {
            "timestamp": self.ts.tolist(),
            "device_id": dev_names,
            "account_id": [info[d].account_id for d in dev_names],
            "channel_freq_hz": self.chan.tolist(),
            "fiber_node": [info[d].fiber_node for d in dev_names],
        }
        for f, v in self.raw.items():
            cols[f] = [repr(x) for x in v.tolist()] if v.dtype.kind == "f" else v.tolist()
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([PNM_SCHEMA[k] for k in keys])
            w.writerows(zip(*(cols[k] for k in keys)) if n else [])


def _schedule(cfg: SynthConfig) -> list[FaultSpec]:
    faults = list(cfg.faults)
    if cfg.random_faults is not None:
        rng = np.random.default_rng([cfg.seed, 0])
        faults += random_schedule(replace(cfg, faults=()), cfg.random_faults, rng)
    spans: dict[str, list[tuple[int, int]]] = {}
    for f in faults:
        for d in f.devices:
            spans.setdefault(d, []).append((f.start, f.end))
    for d, s in spans.items():
        s.sort()
        if any(b > a2 for (_, b), (a2, _) in zip(s, s[1:])):
            raise ConfigInvalid(f"device {d} has overlapping planted faults")
    return faults


def generate(cfg: SynthConfig) -> SynthDataset:
    """Generate a dataset; identical configs give identical output."""
    faults = _schedule(cfg)
    ids = cfg.device_ids
    node_of = cfg.node_of
    directory = Directory({d: DeviceInfo(d, f"acct-{d[3:]}", node_of[d]) for d in ids})
    cad, n_slots = cfg.cadence, cfg.n_slots
    nominal = cfg.start_time + cad * np.arange(n_slots, dtype=np.int64)
    level_fields = [("snr", "snr_db"), ("tx_power", "tx_power_dbmv"), ("rx_power", "rx_power_dbmv")]
    if cfg.emit_mtr:
        level_fields.append(("mtr", "mtr_db"))

    shared = {k: _ar_shape(np.random.default_rng([cfg.seed, 2, k]), n_slots, cfg.group_waveform_sd)
              for k, f in enumerate(faults) if f.type == MAINTENANCE}
    faults_of: dict[str, list[int]] = {}
    for k, f in enumerate(faults):
        for d in f.devices:
            faults_of.setdefault(d, []).append(k)

    n_ch = len(cfg.channels)
    parts: dict[str, list[np.ndarray]] = {f: [] for _, f in level_fields}
    parts.update({f: [] for f in COUNTER_FIELDS})
    dev_parts, ts_parts, chan_parts, fault_parts = [], [], [], []
    tickets: list[Ticket] = []
    for di, d in enumerate(ids):
        rng = np.random.default_rng([cfg.seed, 1, di])
        keep = rng.random(n_slots) >= cfg.missing_prob
        j = cfg.jitter_seconds
        times = nominal + (rng.integers(-j, j + 1, n_slots) if j else 0)
        slot_fault = np.full(n_slots, -1, dtype=np.int64)
        shape = np.zeros(n_slots)
        for k in faults_of.get(d, ()):
            f = faults[k]
            on = (nominal >= f.start) & (nominal < f.end)
            slot_fault[on] = k
            if f.type == MAINTENANCE:
                shape[on] = shared[k][on] + cfg.group_noise * rng.standard_normal(int(on.sum()))
            else:
                shape[on] = _ar_shape(rng, int(on.sum()), cfg.waveform_sd)
        idx = np.flatnonzero(keep)
        n = idx.size
        fault = slot_fault[idx]
        sh = shape[idx]

        def delta(metric):
            out = np.zeros(n)
            for k in np.unique(fault[fault >= 0]).tolist():
                dk = {**cfg.deltas, **(faults[k].deltas or {})}
                out[fault == k] = dk.get(metric, 0.0)
            return out

        levels = {}
        for m, fname in level_fields:
            mean, sd = cfg.baseline[m]
            levels[fname] = mean + sd * rng.standard_normal(n) + delta(m) * sh
        for c in range(n_ch):
            for m, fname in level_fields:
                off = cfg.channel_sd * rng.standard_normal() if n_ch > 1 else 0.0
                parts[fname].append(np.round(levels[fname] + off, 2))
            for m, fname in zip(COUNTER_NAMES, COUNTER_FIELDS):
                mu = np.full(n, cfg.baseline[m][0])
                mult = delta(m)
                mu = np.where(fault >= 0, mu * np.where(mult > 0, mult, 1.0), mu)
                r = cfg.counter_dispersion
                inc = rng.negative_binomial(r, r / (r + mu)).astype(np.int64)
                reset = rng.random(n) < cfg.reset_prob
                reset[0] = False
                parts[fname].append(_cumulate(inc, reset))
        order_t = np.repeat(times[idx][None, :], n_ch, axis=0).T.ravel()
        dev_parts.append(np.full(n * n_ch, di, dtype=np.int64))
        ts_parts.append(order_t)
        chan_parts.append(np.tile(np.array(cfg.channels, dtype=np.int64), n))
        fault_parts.append(np.repeat(fault, n_ch))
        # rows are emitted time-major within the device; reorder channel blocks accordingly
        for fname in parts:
            if n_ch > 1:
                block = np.stack(parts[fname][-n_ch:], axis=1).ravel()
                del parts[fname][-n_ch:]
                parts[fname].append(block)
        tickets += _device_tickets(cfg, rng, d, directory.devices[d].account_id,
                                   [faults[k] for k in faults_of.get(d, ())])

    raw = {f: np.concatenate(v) if v else np.zeros(0) for f, v in parts.items()}
    tickets.sort(key=lambda t: (t.created_at, t.account_id, t.action, t.description, t.closed_at or 0))
    return SynthDataset(cfg, ids, directory, np.concatenate(dev_parts), np.concatenate(ts_parts),
                        np.concatenate(chan_parts), raw, np.concatenate(fault_parts), tickets, faults)


def _device_tickets(cfg: SynthConfig, rng: np.random.Generator, device: str, account: str,
                    faults: Sequence[FaultSpec]) -> list[Ticket]:
    t0, t1 = cfg.start_time, cfg.end_time
    out: list[Ticket] = []

    def emit(times, flag_prob, primary, network=True):
        for t in np.sort(times).tolist():
            flag = bool(rng.random() < flag_prob)
            if network:
                if rng.random() < cfg.dispatch_prob:
                    action, desc = "Dispatch", "Technician visit"
                else:
                    action, desc = "Phone", f"Customer reports {NETWORK_KEYWORDS[int(rng.integers(3))]}"
            else:
                action, desc = OTHER_REASONS[int(rng.integers(len(OTHER_REASONS)))]
            life = int(round(rng.lognormal(math.log(cfg.lifetime_median_hours * HOUR), cfg.lifetime_sigma)))
            out.append(Ticket(account, int(t), int(t) + max(1, life), action, desc, flag,
                              primary if flag else None))

    def arrivals(a, b, rate):
        if cfg.ticket_process == "uniform":
            # evenly spaced at exactly ``rate``: the noise-free ticket stream
            if rate <= 0:
                return np.zeros(0, dtype=np.int64)
            step = HOUR / rate
            return (a + (np.arange(int((b - a) / step)) + 0.5) * step).astype(np.int64)
        return rng.integers(a, b, rng.poisson(rate * (b - a) / HOUR))

    emit(arrivals(t0, t1, cfg.lambda_n), cfg.service_flag_prob, f"P-bg-{device}")
    for f in faults:
        prob = cfg.maintenance_ticket_prob if f.type == MAINTENANCE else cfg.service_flag_prob
        emit(arrivals(f.start, f.end, cfg.lambda_a), prob, f"P-{f.group_id}")
    if cfg.noise_ticket_rate > 0:
        emit(arrivals(t0, t1, cfg.noise_ticket_rate), 0.0, None, network=False)
    return out
