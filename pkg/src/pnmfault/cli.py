"""Command-line front end.

    pnmfault synth   --out-dir D
    pnmfault train   --pnm P --tickets T --out-dir D
    pnmfault detect  --detector F --pnm P --out-dir D   [--at T --device ID]
    pnmfault sweep   --detector F --pnm P --tickets T --out-dir D
    pnmfault cluster --pnm P --tickets T --events E --out-dir D [--thresholds S]
    pnmfault eval    --events E --pnm P --tickets T --out-dir D

Exit status: 0 on success, 2 on configuration errors, 3 on data errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import __version__
from .clustering import SimilarityThresholds, diagnose, prepare, search_similarity_threshold
from .config import config_hash, load_config, similarity_grid
from .detection import detect_events, sweep_window_params, verdict_at
from .errors import ConfigError, DataError, NoFeasibleParams, NoTickets, PnmError
from .evaluation import metric_report, mtr_baseline, observation_window, ticket_stats
from .ingest import (
    TicketFilterConfig,
    build_table,
    filter_network_tickets,
    join_tickets,
    parse_pnm_csv,
    parse_ticket_csv,
)
from .model import HOUR, MAINTENANCE, SERVICE
from .reports import (
    finite_or_none,
    header,
    read_events,
    write_csv,
    write_events,
    write_json,
    write_jsonl,
    write_sweep,
)
from .synthgen import SynthConfig, generate
from .training import TrainedDetector, classify, train_detector

log = logging.getLogger("pnmfault")


class Context:
    """Resolved configuration plus helpers shared by the subcommands."""

    def __init__(self, args: argparse.Namespace):
        overrides: dict = {}
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        if args.seed is not None:
            overrides["seed"] = args.seed
        self.args = args
        self.cfg = load_config(args.config, overrides)
        self.hash = config_hash(self.cfg)
        self.out = Path(args.out_dir) if args.out_dir else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    def head(self) -> dict:
        return header(self.hash, self.cfg["seed"], self.args.command)

    @property
    def cadence(self) -> int:
        return int(round(self.cfg["detection"]["cadence_hours"] * HOUR))

    def out_path(self, name: str) -> Path:
        if self.out is None:
            raise ConfigError(f"{self.args.command} needs --out-dir")
        return self.out / name

    def load_records(self, path):
        res = parse_pnm_csv(_existing(path), self.cfg["ingest"]["pnm_columns"] or None)
        for lineno, reason in res.dropped[:10]:
            log.warning("%s:%d dropped: %s", path, lineno, reason)
        if len(res.dropped) > 10:
            log.warning("%s: %d rows dropped in total", path, len(res.dropped))
        return list(res)

    def load_table(self, records):
        return build_table(records, self.cfg["features"]["metrics"],
                           int(self.cfg["ingest"]["max_gap_hours"] * HOUR))

    def load_tickets(self, path):
        res = parse_ticket_csv(_existing(path), self.cfg["ingest"]["ticket_columns"] or None)
        for lineno, reason in res.dropped[:10]:
            log.warning("%s:%d dropped: %s", path, lineno, reason)
        t = self.cfg["tickets"]
        return filter_network_tickets(res, TicketFilterConfig(set(t["dispatch_actions"]),
                                                              set(t["description_keywords"])))


def _existing(path) -> Path:
    if path is None:
        raise ConfigError("a required input file was not given")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"input file not found: {p}")
    return p


def _load_detector(path) -> TrainedDetector:
    try:
        det = TrainedDetector.loads(_existing(path).read_text())
        for r in det.rules:
            r.spec  # feature names must parse before any data is read
        return det
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: not a valid detector file ({exc})") from exc


def _yaml_with_header(doc: dict, head: dict) -> str:
    lines = "".join(f"# {k}: {v}\n" for k, v in head.items())
    return lines + yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


# -- subcommands --------------------------------------------------------------------

def cmd_synth(ctx: Context) -> int:
    doc = dict(ctx.cfg["synth"])
    if ctx.args.seed is not None or "seed" not in doc:
        doc["seed"] = ctx.cfg["seed"]
    ds = generate(SynthConfig.from_dict(doc))
    paths = ds.write(ctx.out_path(""))
    log.info("wrote %d PNM rows and %d tickets to %s", len(ds), len(ds.tickets), paths["pnm"].parent)
    return 0


def cmd_train(ctx: Context) -> int:
    a, cfg = ctx.args, ctx.cfg
    table = ctx.load_table(ctx.load_records(a.pnm))
    tickets = join_tickets(table, ctx.load_tickets(a.tickets))
    if tickets.matched_tickets == 0:
        raise NoTickets("no network-related tickets match a device with PNM data")
    t, d = cfg["training"], cfg["detection"]
    n_final = a.n_features if a.n_features is not None else t["n_features"]
    det = train_detector(table, tickets, cfg["features"]["metrics"], n_final, t["grid_steps"],
                         t["directions"], d["x"], d["y"], cfg["jobs"], t["max_abnormal_share"])
    if a.x is not None or a.y is not None:
        det.window_x = a.x if a.x is not None else d["x"]
        det.window_y = a.y if a.y is not None else d["y"]
        if not 1 <= det.window_x <= det.window_y:
            raise ConfigError(f"need 1 <= x <= y, got x={det.window_x}, y={det.window_y}")
    elif d["auto_window"]:
        abnormal, _ = classify(table, det.rules)
        lo, hi = d["y_range"]
        try:
            sw = sweep_window_params(table, abnormal, tickets, range(lo, hi + 1), d["coverage_floor"],
                                     cadence=ctx.cadence)
        except NoFeasibleParams as exc:
            log.warning("%s; keeping configured window (%d, %d)", exc, d["x"], d["y"])
        else:
            det.window_x, det.window_y = sw.recommended
            write_sweep(ctx.out_path("train_sweep.csv"), sw, ctx.head())
    ctx.out_path("detector.yaml").write_text(_yaml_with_header(det.to_dict(), ctx.head()))
    log.info("selected %s; window (%d, %d)", ", ".join(r.feature for r in det.rules), det.window_x,
             det.window_y)
    return 0


def cmd_detect(ctx: Context) -> int:
    a = ctx.args
    det = _load_detector(a.detector)
    x = a.x if a.x is not None else det.window_x
    y = a.y if a.y is not None else det.window_y
    table = ctx.load_table(ctx.load_records(a.pnm))
    abnormal, masks = classify(table, det.rules)
    if a.at is not None or a.device is not None:
        if a.at is None or a.device is None:
            raise ConfigError("--at and --device go together")
        if a.device not in table.device_index:
            raise DataError(f"unknown device {a.device!r}")
        v = verdict_at(table, abnormal, a.device, a.at, x, y, ctx.cadence)
        print(f"{v.device_id} at {v.at}: {v.describe()}")
        if ctx.out is not None:
            doc = {"device": v.device_id, "at": v.at, "abnormal": v.abnormal,
                   "abnormal_points": v.abnormal_points, "window_points": v.window_points, "x": x, "y": y,
                   "event": v.event.to_dict() if v.event else None, "verdict": v.describe()}
            write_json(ctx.out_path("verdict.json"), doc, ctx.head())
        return 0
    events = detect_events(table, abnormal, x, y, ctx.cadence, masks)
    write_events(ctx.out_path("events.csv"), events, ctx.head())
    log.info("%d events", len(events))
    return 0


def cmd_sweep(ctx: Context) -> int:
    a, d = ctx.args, ctx.cfg["detection"]
    det = _load_detector(a.detector)
    table = ctx.load_table(ctx.load_records(a.pnm))
    tickets = join_tickets(table, ctx.load_tickets(a.tickets))
    abnormal, _ = classify(table, det.rules)
    lo, hi = d["y_range"]
    if a.y is not None:
        lo = hi = a.y
    sw = sweep_window_params(table, abnormal, tickets, range(lo, hi + 1), d["coverage_floor"],
                             cadence=ctx.cadence)
    write_sweep(ctx.out_path("sweep.csv"), sw, ctx.head())
    print(f"recommended x={sw.recommended[0]} y={sw.recommended[1]}")
    return 0


def cmd_cluster(ctx: Context) -> int:
    a, c = ctx.args, ctx.cfg["clustering"]
    table = ctx.load_table(ctx.load_records(a.pnm))
    events = read_events(_existing(a.events))
    unknown = sorted({e.device_id for e in events} - set(table.device_index))
    if unknown:
        raise DataError(f"events reference devices without PNM data: {unknown[:5]}")
    margin_points = c["margin_points"] if c["margin_points"] is not None else ctx.cfg["detection"]["y"]
    margin = int(margin_points) * ctx.cadence
    features = tuple(c["features"])
    comps = prepare(table, events, features, margin)
    if a.thresholds:
        try:
            th = SimilarityThresholds.from_dict(yaml.safe_load(_existing(a.thresholds).read_text()))
        except (yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{a.thresholds}: not a valid thresholds file ({exc})") from exc
    else:
        tickets = join_tickets(table, ctx.load_tickets(a.tickets))
        th = search_similarity_threshold(table, events, tickets, similarity_grid(ctx.cfg), features, margin,
                                         c["min_group"], c["combine"], c["permutations"], ctx.cfg["seed"],
                                         comps=comps)
        # YAML and the CSV writer both carry infinities (.inf / inf), which mark perfect or undefined splits
        ctx.out_path("thresholds.yaml").write_text(_yaml_with_header(th.to_dict(), ctx.head()))
        rows = [(f, s, r) for f in features for s, r in th.curves[f]]
        write_csv(ctx.out_path("similarity_curve.csv"), ("feature", "cutoff", "trr_m"), rows, ctx.head())
        if th.informative is False:
            log.warning("similarity cutoffs are not better than shuffled ticket labels (p=%.3f)", th.p_value)
    typed, reports = diagnose(table, events, th, margin, c["min_group"], c["combine"], comps=comps)
    write_events(ctx.out_path("typed_events.csv"), typed, ctx.head())
    write_jsonl(ctx.out_path("clusters.jsonl"), [r.to_dict() for r in reports], ctx.head())
    n_m = sum(e.fault_type == MAINTENANCE for e in typed)
    log.info("%d maintenance and %d service events", n_m, sum(e.fault_type == SERVICE for e in typed))
    return 0


def cmd_eval(ctx: Context) -> int:
    a, ev_cfg = ctx.args, ctx.cfg["evaluation"]
    records = ctx.load_records(a.pnm)
    table = ctx.load_table(records)
    tickets = join_tickets(table, ctx.load_tickets(a.tickets))
    events = read_events(_existing(a.events))
    window = observation_window(table, ctx.cadence)
    report = {k: finite_or_none(v) if isinstance(v, float) else v
              for k, v in metric_report(events, tickets, window).items()}
    stats = ticket_stats(events, tickets, ev_cfg["pdf_bin_hours"])
    doc = {"metrics": report, "observation_window": {"start": window.start, "end": window.end},
           "ticket_stats": stats.summary(), "tables": {k: [list(p) for p in v] for k, v in stats.tables.items()}}
    types = sorted({e.fault_type for e in events if e.fault_type})
    if types:
        doc["fault_types"] = {t: sum(e.fault_type == t for e in events) for t in types}
    if any(r.mtr_db is not None for r in records):
        base = mtr_baseline(records, ev_cfg["mtr_threshold_db"])
        doc["mtr_baseline"] = {"threshold_db": ev_cfg["mtr_threshold_db"], "flagged_fraction": base.fraction}
    write_json(ctx.out_path("metrics.json"), doc, ctx.head())
    m = doc["metrics"]
    print(f"accuracy={m['accuracy']} coverage={m['coverage']} normalized_rate={m['normalized_rate']}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "sweep": cmd_sweep,
            "cluster": cmd_cluster, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--jobs", type=int, help="worker processes (results do not depend on it)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out-dir", help="directory for reports")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="pnmfault", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    s = sub.add_parser("train", parents=[common], help="learn thresholds and the sliding window")
    s.add_argument("--pnm", required=True)
    s.add_argument("--tickets", required=True)
    s.add_argument("--n-features", type=int)
    s.add_argument("--x", type=int)
    s.add_argument("--y", type=int)

    s = sub.add_parser("detect", parents=[common], help="detect fault events")
    s.add_argument("--detector", required=True)
    s.add_argument("--pnm", required=True)
    s.add_argument("--x", type=int)
    s.add_argument("--y", type=int)
    s.add_argument("--at", type=int, help="single query: timestamp (epoch seconds)")
    s.add_argument("--device", help="single query: device id")

    s = sub.add_parser("sweep", parents=[common], help="tabulate sliding-window parameters")
    s.add_argument("--detector", required=True)
    s.add_argument("--pnm", required=True)
    s.add_argument("--tickets", required=True)
    s.add_argument("--y", type=int, help="sweep a single window size")

    s = sub.add_parser("cluster", parents=[common], help="type events as maintenance or service")
    s.add_argument("--pnm", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--tickets", help="needed unless --thresholds is given")
    s.add_argument("--thresholds", help="previously learned similarity cutoffs")

    s = sub.add_parser("eval", parents=[common], help="score events against tickets")
    s.add_argument("--events", required=True)
    s.add_argument("--pnm", required=True)
    s.add_argument("--tickets", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](Context(args))
    except ConfigError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 3
    except PnmError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
