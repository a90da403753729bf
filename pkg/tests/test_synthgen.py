import json
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskgraph import config as C
from riskgraph import synthgen as S


def test_same_seed_gives_identical_bytes():
    a = S.dumps_records(S.generate_dataset(300, 2024, [0.25, 0.35, 0.40], 11))
    b = S.dumps_records(S.generate_dataset(300, 2024, [0.25, 0.35, 0.40], 11))
    assert a == b
    assert a != S.dumps_records(S.generate_dataset(300, 2024, [0.25, 0.35, 0.40], 12))


def test_single_forced_low_record():
    (rec,) = S.generate_dataset(1, 2024, [1.0, 0.0, 0.0], 5)
    assert rec.risk == "low"
    assert rec.alert == "none"
    assert rec.pre_alert == S.NO_PRE_ALERT


@pytest.mark.parametrize("dist", [[0.5, 0.5, 0.5], [1.2, -0.1, -0.1], [0.5, 0.5]])
def test_bad_risk_dist_rejected(dist):
    with pytest.raises(ValueError):
        S.generate_dataset(10, 2024, dist, 0)


def test_zero_records_rejected():
    with pytest.raises(ValueError):
        S.generate_dataset(0, 2024, [0.25, 0.35, 0.40], 0)


def test_record_invariants(small_records):
    sev = {s: i for i, s in enumerate(C.SEVERITIES)}
    for r in small_records:
        assert r.season == C.CATEGORIES[r.category].season
        assert r.timestamp.month in C.SEASON_MONTHS[r.season]
        if r.risk == "low":
            assert r.alert == "none" and r.pre_alert.type == "none"
        assert sev[r.pre_alert.severity] <= sev[C.split_alert(r.alert)[1]]
        for s, v in r.sensors.items():
            lo, hi = C.SENSOR_BOUNDS[s]
            assert lo <= v <= hi
        assert r.colocated_count >= 0
        assert r.pre_alert.lead_time >= 0


@pytest.mark.parametrize("alert,sensor,lo,hi", [
    ("heavy_rain_warning", "rainfall", 90, 150),
    ("cold_wave_warning", "temperature", -25, -15),
    ("yellow_dust_warning", "pm", 400, 800),
])
def test_constrained_sensor_ranges(alert, sensor, lo, hi):
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = S.generate_constrained_sensors(alert, rng)[sensor]
        assert lo <= v <= hi


def test_constrained_sensors_unknown_alert():
    with pytest.raises(ValueError):
        S.generate_constrained_sensors("meteor_warning", np.random.default_rng(0))


def test_alert_sequence_shapes():
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(300):
        alert, pa = S.generate_alert_sequence("flood_prevention", "high", rng)
        assert alert == "heavy_rain_warning"
        if pa.type == "none":
            seen.add("direct")
        elif pa.type == alert:
            assert pa.lead_time > 0
            seen.add("pre_alert")
        else:
            assert pa.type == "heavy_rain_advisory" and pa.severity == "advisory"
            seen.add("escalation")
    assert seen == {"direct", "pre_alert", "escalation"}
    for _ in range(100):
        alert, pa = S.generate_alert_sequence("heat_wave", "medium", rng)
        assert alert == "heat_wave_advisory"
        assert pa.type in ("none", "heat_wave_advisory")


def test_alert_sequence_rejects_low():
    with pytest.raises(ValueError):
        S.generate_alert_sequence("heat_wave", "low", np.random.default_rng(0))


def test_fine_dust_high_pm_above_low_p90():
    rng = np.random.default_rng(2)
    low = np.array([S.generate_risk_based_sensors("fine_dust_report", "low", rng)["pm"] for _ in range(1000)])
    high = np.array([S.generate_risk_based_sensors("fine_dust_report", "high", rng)["pm"] for _ in range(1000)])
    assert np.mean(high) > np.percentile(low, 90)


def test_cold_wave_high_is_colder():
    rng = np.random.default_rng(3)
    low = np.mean([S.generate_risk_based_sensors("cold_wave", "low", rng)["temperature"] for _ in range(1000)])
    high = np.mean([S.generate_risk_based_sensors("cold_wave", "high", rng)["temperature"] for _ in range(1000)])
    assert high < low


def test_temporal_clamp_relative_band():
    w = S.TemporalWindow()
    t = datetime(2024, 7, 1, 10, 5)
    base = {s: 0.0 for s in C.SENSORS}
    d0 = C.DISTRICT_NAMES[0]
    S.enforce_temporal_consistency({**base, "rainfall": 100.0}, d0, t, w)
    out = S.enforce_temporal_consistency({**base, "rainfall": 130.0}, d0, t + timedelta(minutes=20), w)
    assert out["rainfall"] == pytest.approx(115.0)


def test_temporal_clamp_zero_reference_uses_absolute_band():
    w = S.TemporalWindow()
    d0 = C.DISTRICT_NAMES[0]
    t = datetime(2024, 7, 1, 10, 5)
    base = {s: 0.0 for s in C.SENSORS}
    S.enforce_temporal_consistency(base, d0, t, w)
    out = S.enforce_temporal_consistency({**base, "rainfall": 30.0}, d0, t + timedelta(minutes=1), w)
    assert out["rainfall"] == pytest.approx(22.5)
    w2 = S.TemporalWindow()
    S.enforce_temporal_consistency(base, d0, t, w2)
    out = S.enforce_temporal_consistency({**base, "rainfall": 2.0}, d0, t + timedelta(minutes=2), w2)
    assert out["rainfall"] == pytest.approx(2.0)


def test_temporal_empty_window_passthrough():
    w = S.TemporalWindow()
    vals = {s: 1.5 for s in C.SENSORS}
    assert S.enforce_temporal_consistency(vals, C.DISTRICT_NAMES[0], datetime(2024, 1, 1), w) == vals
    assert len(w) == len(C.SENSORS)


def test_other_region_is_not_a_reference():
    w = S.TemporalWindow()
    a = C.DISTRICT_NAMES[0]
    b = next(d for d in C.DISTRICT_NAMES if C.DISTRICTS[d].region != C.DISTRICTS[a].region)
    t = datetime(2024, 7, 1, 10, 0)
    base = {s: 0.0 for s in C.SENSORS}
    S.enforce_temporal_consistency({**base, "rainfall": 100.0}, a, t, w)
    out = S.enforce_temporal_consistency({**base, "rainfall": 140.0}, b, t, w)
    assert out["rainfall"] == 140.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 72 * 60), min_size=1, max_size=60))
def test_window_hygiene(offsets):
    w = S.TemporalWindow()
    t0 = datetime(2024, 1, 1)
    for m in sorted(offsets):
        w.append("x", "rainfall", t0 + timedelta(minutes=m), float(m))
    e = w.entries("x", "rainfall")
    ts = [t for t, _ in e]
    assert ts == sorted(ts)
    assert all(e[-1][0] - t <= timedelta(hours=24) for t in ts)


def test_validate_flags_out_of_range():
    (rec,) = S.generate_dataset(1, 2024, [1.0, 0.0, 0.0], 5)
    rec.alert = "heavy_rain_warning"
    rec.sensors["rainfall"] = 170.0
    rep = S.validate_dataset([rec])
    assert rep.applicable == 1 and rep.satisfied == 0
    assert rep.overall < 100.0
    assert rep.violations == [rec.id]


def test_validate_vacuous_and_empty():
    recs = S.generate_dataset(20, 2024, [1.0, 0.0, 0.0], 5)
    rep = S.validate_dataset(recs)
    assert rep.applicable == 0 and rep.overall == 100.0
    with pytest.raises(ValueError):
        S.validate_dataset([])


def test_split_stratified(small_records, small_split):
    n = len(small_records)
    assert len(small_split.train) + len(small_split.val) + len(small_split.test) == n
    strata = {}
    for r in small_records:
        strata[(r.category, r.risk)] = strata.get((r.category, r.risk), 0) + 1
    for part, ratio in ((small_split.val, 0.1), (small_split.test, 0.1)):
        counts = {}
        for r in part:
            counts[(r.category, r.risk)] = counts.get((r.category, r.risk), 0) + 1
        for k, total in strata.items():
            assert abs(counts.get(k, 0) - ratio * total) <= 1
    split, labeled = small_split.arrays(n)
    assert set(np.unique(split)) == {0, 1, 2}
    assert labeled.sum() == small_split.labeled.sum()
    assert np.all(split[labeled] == 0)


def test_split_labeled_ratio_one(small_records):
    sp = S.split_dataset(small_records, labeled_ratio=1.0, seed=0)
    assert sp.labeled.all()


def test_split_small_stratum_named():
    recs = S.generate_dataset(40, 2024, [0.25, 0.35, 0.40], 1)
    with pytest.raises(ValueError, match="stratum"):
        S.split_dataset(recs)


def test_ndjson_round_trip(tmp_path, small_records):
    path = tmp_path / "d.ndjson"
    meta = S.write_dataset(small_records, path, {"seed": 3})
    back = S.read_dataset(path)
    assert S.dumps_records(back) == S.dumps_records(small_records)
    on_disk = json.loads(S.meta_path(path).read_text())
    assert on_disk["sha256"] == meta["sha256"]
    assert on_disk["counts"]["records"] == len(small_records)
    assert on_disk["config_hash"] == C.config_hash()


def test_alert_rule_ranges_ordered():
    for rule in C.ALERT_RULES.values():
        for lo, hi in (rule.advisory_range, rule.warning_range):
            assert lo < hi
