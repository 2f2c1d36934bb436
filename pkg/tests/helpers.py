"""Small fixtures shared between test modules."""

from __future__ import annotations

import numpy as np

from pnmfault.ingest import build_table, join_tickets
from pnmfault.model import HOUR, AnomalyEvent, PnmRecord, Ticket

CAD = 4 * HOUR


def random_fleet(seed: int, n_dev: int = 6, n_points: int = 40, n_nodes: int = 2, n_tickets: int = 30,
                 shared_accounts: bool = True):
    """A table with fiber nodes and occasional gaps, plus joined random tickets."""
    rng = np.random.default_rng(seed)
    recs = []
    for d in range(n_dev):
        acct = f"a{d // 2}" if shared_accounts else f"a{d}"
        t = int(rng.integers(0, 3)) * CAD
        for _ in range(n_points):
            recs.append(PnmRecord(f"d{d}", acct, t, 1, float(rng.normal(30, 2)), 40.0, 0.0, 0, 0, 0, 0, 0,
                                  fiber_node=f"n{d % n_nodes}"))
            t += CAD if rng.random() > 0.05 else 9 * CAD
    table = build_table(recs, ["snr"])
    lo, hi = int(table.times.min()), int(table.times.max()) + CAD
    accounts = sorted({r.account_id for r in recs}) + ["ghost"]
    tickets = [Ticket(str(rng.choice(accounts)), int(rng.integers(lo, hi)), action="Dispatch",
                      is_part_of_primary=bool(rng.random() < 0.5))
               for _ in range(n_tickets)]
    return table, join_tickets(table, tickets), recs, tickets


def random_events(table, rng, n: int) -> list[AnomalyEvent]:
    out = []
    lo, hi = int(table.times.min()), int(table.times.max()) + CAD
    for _ in range(n):
        d = table.device_ids[int(rng.integers(len(table.device_ids)))]
        s = int(rng.integers(lo, hi - 1))
        e = s + int(rng.integers(1, 20 * CAD))
        out.append(AnomalyEvent(d, s, e, 1))
    return out


PIPELINE_CONFIG = """\
seed: 42
detection:
  y_range: [1, 6]
synth:
  n_fiber_nodes: 3
  devices_per_node: 10
  duration_days: 30
  lambda_n: 0.01
  lambda_a: 0.09
  random_faults:
    n_maintenance: 4
    n_service: 12
    group_size: [3, 6]
    duration_hours: [24, 72]
    exclusive: true
"""


def run_pipeline(out, jobs: int = 1, config_text: str = PIPELINE_CONFIG) -> dict:
    """synth, train, sweep, detect, cluster and eval through the CLI; returns exit codes by step."""
    from pnmfault.cli import main

    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "config.yaml"
    cfg.write_text(config_text)
    data, rep = out / "data", out / "reports"
    common = ["--config", str(cfg), "--jobs", str(jobs)]
    steps = {
        "synth": ["synth", "--out-dir", str(data)],
        "train": ["train", "--pnm", str(data / "pnm.csv"), "--tickets", str(data / "tickets.csv"),
                  "--out-dir", str(rep)],
        "sweep": ["sweep", "--detector", str(rep / "detector.yaml"), "--pnm", str(data / "pnm.csv"),
                  "--tickets", str(data / "tickets.csv"), "--out-dir", str(rep)],
        "detect": ["detect", "--detector", str(rep / "detector.yaml"), "--pnm", str(data / "pnm.csv"),
                   "--out-dir", str(rep)],
        "cluster": ["cluster", "--pnm", str(data / "pnm.csv"), "--tickets", str(data / "tickets.csv"),
                    "--events", str(rep / "events.csv"), "--out-dir", str(rep)],
        "eval": ["eval", "--events", str(rep / "typed_events.csv"), "--pnm", str(data / "pnm.csv"),
                 "--tickets", str(data / "tickets.csv"), "--out-dir", str(rep)],
    }
    codes = {}
    for name, argv in steps.items():
        codes[name] = main(argv[:1] + common + argv[1:])
        if codes[name] != 0:
            break
    return codes


def tree_bytes(root) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
