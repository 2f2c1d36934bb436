from __future__ import annotations

import json

import pytest
import yaml

from helpers import run_pipeline, tree_bytes
from pnmfault.cli import main
from pnmfault.model import HOUR
from pnmfault.training import LOW, ThresholdRule, TrainedDetector


def test_pipeline_runs_and_repeats_exactly(tmp_path):
    assert set(run_pipeline(tmp_path / "a").values()) == {0}
    assert set(run_pipeline(tmp_path / "b").values()) == {0}
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    assert {"reports/metrics.json", "reports/events.csv", "reports/typed_events.csv", "reports/detector.yaml",
            "reports/thresholds.yaml", "reports/sweep.csv", "reports/clusters.jsonl"} <= set(a)


def test_reports_carry_provenance(tmp_path):
    run_pipeline(tmp_path)
    rep = tmp_path / "reports"
    doc = json.loads((rep / "metrics.json").read_text())
    head = doc["header"]
    assert head["seed"] == 42 and head["command"] == "eval" and len(head["config_hash"]) == 16
    assert (rep / "events.csv").read_text().startswith("# tool: pnmfault\n")
    det = TrainedDetector.loads((rep / "detector.yaml").read_text())
    assert 1 <= det.window_x <= det.window_y and det.rules


def _fault_fixture(tmp_path):
    """One planted service fault and a hand-made detector that flags low SNR."""
    start = 1_577_836_800
    f_start = start + 5 * 24 * HOUR
    synth = {"seed": 3, "n_fiber_nodes": 1, "devices_per_node": 3, "duration_days": 10, "jitter_seconds": 0,
             "faults": [{"type": "service", "fiber_node": "fn-000", "devices": ["cm-00001"],
                         "start": f_start, "end": f_start + 48 * HOUR}]}
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"synth": synth}))
    assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "data")]) == 0
    det = TrainedDetector([ThresholdRule("snr-avg-1", LOW, thr_low=34.0)], 2, 3)
    (tmp_path / "det.yaml").write_text(det.dumps())
    return cfg, f_start


def _query(tmp_path, cfg, at, device="cm-00001"):
    return main(["detect", "--config", str(cfg), "--detector", str(tmp_path / "det.yaml"),
                 "--pnm", str(tmp_path / "data" / "pnm.csv"), "--at", str(at), "--device", device])


def test_single_query_during_planted_fault(tmp_path, capsys):
    cfg, f_start = _fault_fixture(tmp_path)
    truth = json.loads((tmp_path / "data" / "ground_truth.json").read_text())
    assert truth["devices"]["cm-00001"][0]["start"] == f_start
    assert _query(tmp_path, cfg, f_start + 24 * HOUR) == 0
    assert "abnormal, x-of-y satisfied" in capsys.readouterr().out
    assert _query(tmp_path, cfg, f_start - 24 * HOUR) == 0
    out = capsys.readouterr().out
    assert ": normal (" in out
    assert _query(tmp_path, cfg, f_start + 24 * HOUR, "cm-00000") == 0
    assert ": normal (" in capsys.readouterr().out


def test_single_query_matches_batch_report(tmp_path, capsys):
    cfg, f_start = _fault_fixture(tmp_path)
    rep = tmp_path / "rep"
    assert main(["detect", "--config", str(cfg), "--detector", str(tmp_path / "det.yaml"),
                 "--pnm", str(tmp_path / "data" / "pnm.csv"), "--out-dir", str(rep)]) == 0
    from pnmfault.reports import read_events
    events = read_events(rep / "events.csv")
    assert [e.device_id for e in events] == ["cm-00001"]
    for at in range(f_start - 12 * HOUR, f_start + 60 * HOUR, 3 * HOUR):
        _query(tmp_path, cfg, at)
        inside = any(e.start <= at < e.end for e in events)
        assert ("abnormal, x-of-y satisfied" in capsys.readouterr().out) == inside, at


def test_single_query_needs_both_flags(tmp_path, capsys):
    cfg, f_start = _fault_fixture(tmp_path)
    code = main(["detect", "--config", str(cfg), "--detector", str(tmp_path / "det.yaml"),
                 "--pnm", str(tmp_path / "data" / "pnm.csv"), "--at", str(f_start)])
    assert code == 2
    assert _query(tmp_path, cfg, f_start, "cm-99999") == 3


def test_bad_detector_file_exits_3(tmp_path):
    cfg, _ = _fault_fixture(tmp_path)
    (tmp_path / "det.yaml").write_text(TrainedDetector([ThresholdRule("snr-bogus-1", LOW, thr_low=1.0)]).dumps())
    assert _query(tmp_path, cfg, 0) == 3


def test_train_without_network_tickets_exits_3(tmp_path, capsys):
    cfg, _ = _fault_fixture(tmp_path)
    tickets = tmp_path / "t.csv"
    tickets.write_text("account,created,closed,action,description,part_of_primary,primary_id\n"
                       "acct-00001,1578000000,,Phone,Billing question,0,\n")
    code = main(["train", "--config", str(cfg), "--pnm", str(tmp_path / "data" / "pnm.csv"),
                 "--tickets", str(tickets), "--out-dir", str(tmp_path / "rep")])
    assert code == 3
    assert "NoTickets" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["colour: red\n", "detection:\n  x: 5\n  y: 2\n", "a: [\n"])
def test_bad_config_exits_2(tmp_path, capsys, text):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "d")]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_missing_input_exits_3(tmp_path, capsys):
    code = main(["eval", "--events", str(tmp_path / "none.csv"), "--pnm", str(tmp_path / "none.csv"),
                 "--tickets", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)])
    assert code == 3


def test_env_override_reaches_cli(tmp_path, monkeypatch):
    monkeypatch.setenv("PNMFAULT_SYNTH", "{n_fiber_nodes: 1, devices_per_node: 2, duration_days: 2}")
    monkeypatch.setenv("PNMFAULT_SEED", "5")
    assert main(["synth", "--out-dir", str(tmp_path)]) == 0
    pnm = (tmp_path / "pnm.csv").read_text().splitlines()
    assert {ln.split(",")[1] for ln in pnm[1:]} == {"cm-00000", "cm-00001"}
