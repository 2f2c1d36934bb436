from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from pnmfault.features import (
    FeatureSpec,
    all_specs,
    avg,
    ewma,
    generate_all,
    iter_features,
    metric_specs,
    variance,
    wma,
    wma_diff,
)
from pnmfault.ingest import build_table
from pnmfault.model import DAY, HOUR, DeviceSeries, PnmRecord

BRUTE = {"avg": oracles.brute_avg, "wma": oracles.brute_wma, "wma_diff": oracles.brute_wma_diff,
         "var": oracles.brute_var}


def brute(spec, times, values):
    if spec.model == "ewma":
        return oracles.brute_ewma(values, spec.lam)
    return BRUTE[spec.model](times, values, spec.window_days)


def series(values, step=DAY):
    return DeviceSeries("d", "snr", [i * step for i in range(len(values))], values)


def test_hand_examples_with_one_day_spacing():
    s = series([2.0, 4.0, 6.0])
    assert avg(s, 3).values[-1] == pytest.approx(4.0, abs=1e-12)
    assert wma(s, 3).values[-1] == pytest.approx(28 / 6, abs=1e-12)
    assert wma_diff(s, 3).values[-1] == pytest.approx(6 - 28 / 6, abs=1e-12)
    assert variance(series([1.0, 3.0]), 2).values[-1] == pytest.approx(1.0, abs=1e-12)
    assert ewma(series([2.0, 4.0]), 0.5).values.tolist() == [2.0, 3.0]


def test_window_is_half_open_on_the_left():
    # a point exactly win days back falls outside the window
    s = series([10.0, 20.0])
    assert avg(s, 1).values.tolist() == [10.0, 20.0]
    assert avg(s, 2).values.tolist() == [10.0, 15.0]


def test_ewma_matches_closed_form():
    v = [3.0, -1.0, 4.0, 1.0, 5.0, 9.0, 2.0]
    assert np.allclose(ewma(series(v), 0.3).values, oracles.closed_form_ewma(v, 0.3), atol=1e-12, rtol=0)


def test_feature_counts_and_names():
    assert len(metric_specs("snr")) == 37
    assert len(all_specs(["snr", "tx_power", "rx_power", "unerrored", "corrected", "uncorrectable",
                          "t3_timeouts", "t4_timeouts", "mtr"])) == 333
    names = [s.name for s in all_specs(["snr", "tx_power"])]
    assert len(set(names)) == 74
    assert "snr-wma-diff-7" in names and "tx_power-ewma-0.1" in names and "snr-var-1" in names
    for s in all_specs(["tx_power"]):
        assert FeatureSpec.parse(s.name) == s


def test_spec_validation():
    with pytest.raises(ValueError):
        FeatureSpec("snr", "ewma", lam=1.0)
    with pytest.raises(ValueError):
        FeatureSpec("snr", "avg", window_days=0)
    with pytest.raises(ValueError):
        FeatureSpec("snr", "median", window_days=1)


times_strat = st.lists(st.integers(1, 3 * DAY), min_size=1, max_size=40).map(
    lambda gaps: np.cumsum(gaps).tolist())
value_strat = st.floats(-100, 100, allow_nan=False)


@given(times_strat.flatmap(lambda ts: st.tuples(st.just(ts), st.lists(value_strat, min_size=len(ts),
                                                                        max_size=len(ts)))))
def test_all_variants_match_brute_force(data):
    ts, vs = data
    t = np.array(ts, dtype=np.int64)
    offsets = np.array([0, len(ts)])
    for spec, out in iter_features(t, {"snr": np.array(vs)}, offsets, metric_specs("snr")):
        assert np.allclose(out, brute(spec, ts, vs), atol=1e-9, rtol=0), spec.name


@given(times_strat.flatmap(lambda ts: st.tuples(st.just(ts), st.lists(value_strat, min_size=len(ts),
                                                                        max_size=len(ts)))),
       st.floats(-50, 50), st.floats(0.1, 10))
def test_shift_and_scale_behaviour(data, c, a):
    ts, vs = data
    t = np.array(ts, dtype=np.int64)
    offsets = np.array([0, len(ts)])
    base = dict((s.name, o.copy()) for s, o in iter_features(t, {"snr": np.array(vs)}, offsets, metric_specs("snr")))
    moved = dict((s.name, o.copy()) for s, o in
                 iter_features(t, {"snr": a * np.array(vs) + c}, offsets, metric_specs("snr")))
    for name, b in base.items():
        spec = FeatureSpec.parse(name)
        if spec.model == "var":
            expected = a * a * b
        elif spec.model == "wma_diff":
            expected = a * b
        else:
            expected = a * b + c
        assert np.allclose(moved[name], expected, atol=1e-6, rtol=1e-9), name


@given(st.integers(2, 30), st.integers(0, 29), st.floats(-50, 50))
def test_features_are_causal(n, k, bump):
    k = min(k, n - 1)
    rng = np.random.default_rng(n)
    vs = rng.normal(size=n)
    ts = np.arange(n, dtype=np.int64) * 6 * HOUR
    changed = vs.copy()
    changed[k] += bump
    offsets = np.array([0, n])
    a = {s.name: o.copy() for s, o in iter_features(ts, {"snr": vs}, offsets, metric_specs("snr"))}
    b = {s.name: o.copy() for s, o in iter_features(ts, {"snr": changed}, offsets, metric_specs("snr"))}
    for name in a:
        assert np.array_equal(a[name][:k], b[name][:k]), name


def test_generate_all_restarts_per_device():
    recs = []
    for d, base in (("a", 10.0), ("b", 50.0)):
        for i in range(5):
            recs.append(PnmRecord(d, "x", i * HOUR, 1, base + i, 40.0, 0.0, 0, 0, 0, 0, 0))
    table = build_table(recs, ["snr"])
    feats = {(f.device_id, f.name): f for f in generate_all(table, ["snr"])}
    assert len(feats) == 74
    assert feats[("b", "snr-ewma-0.5")].values.tolist() == oracles.brute_ewma([50.0, 51, 52, 53, 54], 0.5)
    assert feats[("b", "snr-avg-1")].values[0] == 50.0
    with pytest.raises(ValueError):
        generate_all(table, [])
