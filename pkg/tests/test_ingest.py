from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pnmfault.errors import EmptyFile, MissingColumn
from pnmfault.ingest import (
    PNM_SCHEMA,
    TicketFilterConfig,
    build_series,
    build_table,
    filter_network_tickets,
    is_network_ticket,
    join_tickets,
    parse_pnm_csv,
    parse_ticket_csv,
    write_pnm_csv,
    write_ticket_csv,
)
from pnmfault.model import DAY, HOUR, PnmRecord, Ticket

HEADER = ["ts", "mac", "account", "freq", "snr", "tx", "rx", "unerr", "corr", "uncorr", "t3", "t4"]


def write_rows(path, rows, header=HEADER):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def row(ts, mac="m1", snr="35.5", freq=1, unerr=10, uncorr=0):
    return [ts, mac, "a1", freq, snr, "42.0", "0.5", unerr, 0, uncorr, 0, 0]


def test_well_formed_file(tmp_path):
    p = tmp_path / "pnm.csv"
    write_rows(p, [row(300), row(100), row(200)])
    res = parse_pnm_csv(p)
    assert len(res) == 3 and res.dropped == []
    assert [r.timestamp for r in res] == [100, 200, 300]
    assert res.items[0].mtr_db is None and res.items[0].fiber_node is None


def test_bad_snr_row_dropped_with_line_number(tmp_path):
    p = tmp_path / "pnm.csv"
    write_rows(p, [row(100), row(200, snr="n/a"), row(300)])
    res = parse_pnm_csv(p)
    assert len(res) == 2
    assert [ln for ln, _ in res.dropped] == [3]


def test_duplicates_keep_later_row(tmp_path):
    rows = [row(100, snr="30"), row(200), row(100, snr="31"), row(100, mac="m2"), row(100, snr="32")]
    p = tmp_path / "pnm.csv"
    write_rows(p, rows)
    res = parse_pnm_csv(p)
    # oracle: group by (device, channel, ts), keep the last
    last = {}
    for r in rows:
        last[(r[1], r[3], r[0])] = float(r[4])
    assert res.duplicates == 2
    assert {(r.device_id, r.channel_freq_hz, r.timestamp): r.snr_db for r in res} == last


def test_missing_column_and_empty_file(tmp_path):
    p = tmp_path / "pnm.csv"
    write_rows(p, [row(1)[:-1]], HEADER[:-1])
    with pytest.raises(MissingColumn) as exc:
        parse_pnm_csv(p)
    assert exc.value.name == "t4"
    e = tmp_path / "empty.csv"
    e.write_text("")
    with pytest.raises(EmptyFile):
        parse_pnm_csv(e)


def test_schema_remap(tmp_path):
    p = tmp_path / "pnm.csv"
    header = list(HEADER)
    header[1] = "device"
    write_rows(p, [row(100)], header)
    res = parse_pnm_csv(p, {"device_id": "device"})
    assert res.items[0].device_id == "m1"


def test_ticket_parsing(tmp_path):
    p = tmp_path / "t.csv"
    write_rows(p, [["a1", 100, "", "Dispatch", "x", "1", "P1"],
                   ["a1", 100, 50, "Dispatch", "x", "0", ""],
                   ["a2", 200, 300, "Phone", "Noisy line", "0", ""]],
               ["account", "created", "closed", "action", "description", "part_of_primary", "primary_id"])
    res = parse_ticket_csv(p)
    assert len(res) == 2 and len(res.dropped) == 1
    assert res.items[0].closed_at is None and res.items[0].is_part_of_primary
    assert res.items[0].primary_ticket_id == "P1"


def test_ticket_round_trip_10k(tmp_path):
    rng = np.random.default_rng(3)
    tickets = []
    for i in range(10_000):
        created = int(rng.integers(0, 10**9))
        closed = None if rng.random() < 0.1 else created + int(rng.integers(0, 10**6))
        tickets.append(Ticket(f"acct{int(rng.integers(500))}", created, closed,
                              str(rng.choice(["Dispatch", "Phone", "Customer Education"])),
                              str(rng.choice(["Data Down, again", "billing \"question\"", ""])),
                              bool(rng.random() < 0.2), f"P{i}" if rng.random() < 0.2 else None))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_ticket_csv(tickets, a)
    parsed = list(parse_ticket_csv(a))
    assert parsed == tickets
    write_ticket_csv(parsed, b)
    assert a.read_bytes() == b.read_bytes()


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
counts = st.integers(0, 2**53)
records = st.builds(
    PnmRecord, device_id=st.text("abc123", min_size=1, max_size=4), account_id=st.text("xyz", min_size=1, max_size=3),
    timestamp=st.integers(0, 2**40), channel_freq_hz=st.integers(0, 10**9), snr_db=finite, tx_power_dbmv=finite,
    rx_power_dbmv=finite, unerrored=counts, corrected=counts, uncorrectable=counts, t3_timeouts=counts,
    t4_timeouts=counts, mtr_db=st.none() | finite, fiber_node=st.none() | st.text("fn0", min_size=1, max_size=3))


@given(st.lists(records, max_size=8, unique_by=lambda r: (r.device_id, r.channel_freq_hz, r.timestamp)))
def test_pnm_round_trip_is_bit_exact(tmp_path_factory, recs):
    p = tmp_path_factory.mktemp("rt") / "pnm.csv"
    write_pnm_csv(recs, p)
    back = list(parse_pnm_csv(p))
    assert back == sorted(recs, key=lambda r: (r.device_id, r.timestamp, r.channel_freq_hz))


def test_filter_examples():
    cfg = TicketFilterConfig()
    assert cfg.dispatch_actions == {"Dispatch"}
    assert cfg.description_keywords == {"Data Down", "Noisy Line", "Slow Speed"}
    assert is_network_ticket(Ticket("a", 0, action="Dispatch", description="other"), cfg)
    assert not is_network_ticket(Ticket("a", 0, action="Customer Education", description="billing question"), cfg)
    assert is_network_ticket(Ticket("a", 0, action="Closed", description="customer reports NOISY LINE at night"), cfg)


ticket_strat = st.builds(Ticket, account_id=st.sampled_from(["a", "b"]), created_at=st.integers(0, 100),
                         action=st.sampled_from(["Dispatch", "Phone", "Closed"]),
                         description=st.sampled_from(["slow speed today", "bill", "", "DATA DOWN"]))


@given(st.lists(ticket_strat, max_size=20))
def test_filter_is_idempotent_and_order_preserving(ts):
    once = filter_network_tickets(ts)
    assert filter_network_tickets(once) == once
    it = iter(ts)
    assert all(any(t is u for u in it) for t in once)


def prec(ts, freq=1, snr=30.0, unerr=0, dev="d1", acct="a1"):
    return PnmRecord(dev, acct, ts, freq, snr, 40.0, 0.0, unerr, 0, 0, 0, 0)


def test_counter_differencing_and_reset():
    s = build_series([prec(0, unerr=10), prec(10, unerr=14), prec(20, unerr=14)], "unerrored")
    assert s["d1"].values.tolist() == [10, 4, 0]
    s = build_series([prec(0, unerr=10), prec(10, unerr=3)], "unerrored")
    assert s["d1"].values.tolist() == [10, 3]


def test_worst_channel_reduction():
    s = build_series([prec(0, freq=1, snr=30.0), prec(0, freq=2, snr=25.0)], "snr")
    assert s["d1"].values.tolist() == [25.0]


def test_counters_are_differenced_per_channel():
    recs = [prec(0, 1, unerr=100), prec(0, 2, unerr=5), prec(10, 1, unerr=110), prec(10, 2, unerr=6)]
    assert build_series(recs, "unerrored")["d1"].values.tolist() == [100, 10]


@given(st.lists(st.integers(0, 50 * HOUR), min_size=1, max_size=30, unique=True))
def test_holding_intervals_cover_first_to_last(ts):
    table = build_table([prec(t) for t in ts], ["snr"], max_gap=100 * DAY)
    assert table.total_time() == max(ts) - min(ts)
    assert np.all(np.diff(table.times) > 0)


def test_long_gaps_break_the_step_function():
    table = build_table([prec(0), prec(HOUR), prec(HOUR + 2 * DAY), prec(HOUR + 2 * DAY + 10)], ["snr"])
    assert table.hold.tolist() == [HOUR, 0, 10, 0]
    assert table.segment_start.tolist() == [True, False, True, False]


def test_join_attributes_tickets_to_all_devices_of_account():
    recs = [prec(0, dev="d1"), prec(100, dev="d1"), prec(0, dev="d2"), prec(100, dev="d2"),
            prec(0, dev="d3", acct="a3"), prec(100, dev="d3", acct="a3")]
    table = build_table(recs, ["snr"])
    idx = join_tickets(table, [Ticket("a1", 50), Ticket("zz", 10), Ticket("a3", 100)])
    assert idx.unmatched == 1
    assert idx.matched_tickets == 2
    assert sorted(idx.device.tolist()) == [0, 1, 2]
    # the a3 ticket at t=100 lands after d3's last holding interval
    assert sorted(idx.point.tolist()) == [-1, 0, 2]
    assert idx.count_in(np.array([0, 1]), np.array([0, 60]), np.array([60, 100])).tolist() == [1, 0]
