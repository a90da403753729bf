"""Constraint-based synthetic incident generator.

Records are drawn one at a time: category, season, timestamp, risk, alert
sequence, sensors, location, then the spatiotemporal clamp against a
rolling 24 h window of earlier readings. The window is order-dependent
state, so the clamp sees records in generation order by default;
``order="timestamp"`` replays the clamp in time order instead (much denser
clamping, and many more alert-range violations at scale).
"""

from __future__ import annotations

import bisect
import calendar
import json
import math
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import config as C

TS_FORMAT = "%Y-%m-%dT%H:%M"


@dataclass(frozen=True)
class PreAlert:
    type: str = "none"
    lead_time: int = 0
    severity: str = "none"


NO_PRE_ALERT = PreAlert()


@dataclass
class ReportRecord:
    id: int
    timestamp: datetime
    category: str
    season: str
    location: str
    sensors: dict[str, float]
    alert: str
    pre_alert: PreAlert
    drainage: str
    colocated_count: int
    risk: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "timestamp": self.timestamp.strftime(TS_FORMAT),
            "category": self.category,
            "season": self.season,
            "location": self.location,
            "sensors": {k: float(self.sensors[k]) for k in C.SENSORS},
            "alert": self.alert,
            "pre_alert": {
                "type": self.pre_alert.type,
                "lead_time": self.pre_alert.lead_time,
                "severity": self.pre_alert.severity,
            },
            "drainage": self.drainage,
            "colocated_count": self.colocated_count,
            "risk": self.risk,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReportRecord":
        pa = d.get("pre_alert") or {}
        return cls(
            id=int(d["id"]),
            timestamp=datetime.strptime(d["timestamp"], TS_FORMAT),
            category=d["category"],
            season=d["season"],
            location=d["location"],
            sensors={k: float(d["sensors"][k]) for k in C.SENSORS},
            alert=d["alert"],
            pre_alert=PreAlert(pa.get("type", "none"), int(pa.get("lead_time", 0)), pa.get("severity", "none")),
            drainage=d["drainage"],
            colocated_count=int(d["colocated_count"]),
            risk=d["risk"],
        )


class TemporalWindow:
    """Trailing 24 h of readings per (district, sensor kind)."""

    def __init__(self, hours: int = C.WINDOW_HOURS):
        self.span = timedelta(hours=hours)
        self._rings: dict[tuple[str, str], deque] = {}

    def __len__(self) -> int:
        return sum(len(r) for r in self._rings.values())

    def entries(self, district: str, sensor: str) -> list[tuple[datetime, float]]:
        return list(self._rings.get((district, sensor), ()))

    def append(self, district: str, sensor: str, timestamp: datetime, value: float) -> None:
        ring = self._rings.setdefault((district, sensor), deque())
        if not ring or ring[-1][0] <= timestamp:
            ring.append((timestamp, value))
        else:
            items = list(ring)
            keys = [t for t, _ in items]
            items.insert(bisect.bisect_right(keys, timestamp), (timestamp, value))
            ring.clear()
            ring.extend(items)
        horizon = ring[-1][0] - self.span
        while ring and ring[0][0] < horizon:
            ring.popleft()

    def reference(self, district: str, sensor: str, timestamp: datetime) -> float | None:
        """Most recent reading in the same clock hour here or in a same-region district."""
        hour = timestamp.replace(minute=0, second=0, microsecond=0)
        region = C.DISTRICTS[district].region
        best: tuple[datetime, int] | None = None
        value = None
        for name in C.DISTRICT_NAMES:
            if C.DISTRICTS[name].region != region:
                continue
            ring = self._rings.get((name, sensor))
            if not ring:
                continue
            for ts, v in reversed(ring):
                if ts < hour:
                    break
                if ts.replace(minute=0) != hour or ts > timestamp:
                    continue
                # own district wins ties
                rank = (ts, 1 if name == district else 0)
                if best is None or rank > best:
                    best, value = rank, v
                break
        return value


def _truncnorm(rng: np.random.Generator, mean: float, sd: float, lo: float, hi: float) -> float:
    if sd <= 0:
        return float(min(max(mean, lo), hi))
    for _ in range(64):
        x = rng.normal(mean, sd)
        if lo <= x <= hi:
            return float(x)
    return float(min(max(mean, lo), hi))


def _clip(sensor: str, value: float) -> float:
    lo, hi = C.SENSOR_BOUNDS[sensor]
    return float(min(max(value, lo), hi))


def apparent_temperature(temp: float, humidity: float, wind: float) -> float:
    """Steadman's apparent temperature (shade, no radiation term)."""
    vapour = humidity / 100.0 * 6.105 * math.exp(17.27 * temp / (237.7 + temp))
    return _clip("apparent_temp", temp + 0.33 * vapour - 0.70 * wind - 4.0)


def _baseline_sensors(season: str, rng: np.random.Generator) -> dict[str, float]:
    base = C.SEASONAL_BASELINES[season]
    out = {}
    for sensor in C.SENSORS:
        if sensor == "apparent_temp":
            continue
        mean, sd = base[sensor]
        out[sensor] = _truncnorm(rng, mean, sd, *C.SENSOR_BOUNDS[sensor])
    return out


def _finish(sensors: dict[str, float]) -> dict[str, float]:
    sensors["apparent_temp"] = apparent_temperature(sensors["temperature"], sensors["humidity"], sensors["wind"])
    return {k: _clip(k, sensors[k]) for k in C.SENSORS}


_FAMILY_SEASON = {
    "heavy_rain": "summer",
    "heat_wave": "summer",
    "cold_wave": "winter",
    "heavy_snow": "winter",
    "yellow_dust": "spring",
    "typhoon": "summer",
}


def generate_constrained_sensors(alert: str, rng: np.random.Generator, season: str | None = None) -> dict[str, float]:
    """Sensors for an issued alert: the governed reading inside the rule's range."""
    if alert == "none":
        raise ValueError("generate_constrained_sensors needs an issued alert, got 'none'")
    family, severity = C.split_alert(alert)
    rule = C.ALERT_RULES[family]
    sensors = _baseline_sensors(season or _FAMILY_SEASON[family], rng)
    lo, hi = rule.range_for(severity)
    sensors[rule.sensor] = float(rng.uniform(lo, hi))
    return _finish(sensors)


def risk_sensor_distribution(category: str, risk: str, sensor: str, direction: int) -> tuple[float, float]:
    """(mean, sd) of the risk-graded distribution of a category's primary sensor."""
    season = C.CATEGORIES[category].season
    neutral = C.SEASONAL_BASELINES[season][sensor][0]
    onset = C.HAZARD_ONSET[(sensor, direction)]
    span = onset - neutral
    return neutral + C.RISK_HAZARD_FRACTION[risk] * span, 0.15 * abs(span)


def generate_risk_based_sensors(category: str, risk: str, rng: np.random.Generator) -> dict[str, float]:
    """Sensors without an alert; the category's primary sensors follow the risk grade."""
    if risk not in C.RISKS:
        raise ValueError(f"unknown risk {risk!r}")
    cat = C.CATEGORIES[category]
    sensors = _baseline_sensors(cat.season, rng)
    for sensor, direction in cat.primary:
        mean, sd = risk_sensor_distribution(category, risk, sensor, direction)
        sensors[sensor] = _truncnorm(rng, mean, sd, *C.SENSOR_BOUNDS[sensor])
    return _finish(sensors)


def generate_alert_sequence(
    category: str,
    risk: str,
    rng: np.random.Generator,
    scenario_probs: Sequence[float] = C.SCENARIO_PROBS,
) -> tuple[str, PreAlert]:
    """Pick an alert family for the category and one of the three progression scenarios.

    Medium risk issues an advisory, high risk a warning. Escalation
    (advisory pre-alert, then warning) only exists for warnings.
    """
    if risk not in ("medium", "high"):
        raise ValueError(f"alert sequences exist only for medium/high risk, got {risk!r}")
    families = C.CATEGORIES[category].alert_families
    family = families[int(rng.integers(len(families)))]
    severity = "advisory" if risk == "medium" else "warning"
    alert = C.alert_state(family, severity)

    probs = np.array(scenario_probs, dtype=float)
    if severity == "advisory":
        probs[2] = 0.0
    probs /= probs.sum()
    scenario = int(rng.choice(3, p=probs))
    if scenario == 0:
        return alert, NO_PRE_ALERT
    lead = int(C.PRE_ALERT_LEAD_HOURS[int(rng.integers(len(C.PRE_ALERT_LEAD_HOURS)))])
    if scenario == 1:
        return alert, PreAlert(alert, lead, severity)
    return alert, PreAlert(C.alert_state(family, "advisory"), lead, "advisory")


def temporal_band(reference: float, sensor: str, sigma: float) -> tuple[float, float]:
    lo_b, hi_b = C.SENSOR_BOUNDS[sensor]
    scale = hi_b - lo_b
    if abs(reference) < C.TEMPORAL_ZERO_EPS * scale:
        lo, hi = reference - sigma * scale, reference + sigma * scale
    else:
        lo, hi = reference - sigma * abs(reference), reference + sigma * abs(reference)
    return max(lo, lo_b), min(hi, hi_b)


def enforce_temporal_consistency(
    sensors: dict[str, float],
    location: str,
    timestamp: datetime,
    window: TemporalWindow,
    sigma: float = C.TEMPORAL_SIGMA,
) -> dict[str, float]:
    """Clamp each reading to within +-sigma of a same-hour reading nearby, then record it."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = {}
    for sensor in C.SENSORS:
        value = sensors[sensor]
        ref = window.reference(location, sensor, timestamp)
        if ref is not None:
            lo, hi = temporal_band(ref, sensor, sigma)
            value = min(max(value, lo), hi)
        out[sensor] = float(value)
    for sensor, value in out.items():
        window.append(location, sensor, timestamp, value)
    return out


def generate_timestamp(year: int, season: str, rng: np.random.Generator) -> datetime:
    days = [
        (month, day)
        for month in sorted(C.SEASON_MONTHS[season])
        for day in range(1, calendar.monthrange(year, month)[1] + 1)
    ]
    month, day = days[int(rng.integers(len(days)))]
    w = np.array(C.DIURNAL_WEIGHTS)
    hour = int(rng.choice(24, p=w / w.sum()))
    minute = int(rng.integers(60))
    return datetime(year, month, day, hour, minute)


def sample_location(season: str, rng: np.random.Generator) -> str:
    # uniform over the gazetteer; the season is accepted for interface parity
    return C.DISTRICT_NAMES[int(rng.integers(len(C.DISTRICT_NAMES)))]


def _check_risk_dist(risk_dist: Sequence[float]) -> np.ndarray:
    p = np.asarray(risk_dist, dtype=float)
    if p.shape != (3,):
        raise ValueError(f"risk_dist needs 3 probabilities, got {len(p)}")
    if (p < 0).any():
        raise ValueError(f"risk_dist has a negative entry: {list(p)}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"risk_dist must sum to 1 (got {p.sum():.12g})")
    return p


def generate_dataset(
    n: int,
    year: int,
    risk_dist: Sequence[float],
    seed: int,
    *,
    sigma: float = C.TEMPORAL_SIGMA,
    scenario_probs: Sequence[float] = C.SCENARIO_PROBS,
    order: str = "generation",
) -> list[ReportRecord]:
    """Generate ``n`` records. Equal arguments give identical records."""
    if order not in ("generation", "timestamp"):
        raise ValueError(f"order must be 'generation' or 'timestamp', got {order!r}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = _check_risk_dist(risk_dist)
    rng = np.random.default_rng(seed)

    drafts = []
    for i in range(n):
        category = C.CATEGORY_NAMES[int(rng.integers(len(C.CATEGORY_NAMES)))]
        season = C.CATEGORIES[category].season
        timestamp = generate_timestamp(year, season, rng)
        risk = C.RISKS[int(rng.choice(3, p=p))]
        if risk in ("medium", "high"):
            alert, pre_alert = generate_alert_sequence(category, risk, rng, scenario_probs)
        else:
            alert, pre_alert = "none", NO_PRE_ALERT
        if alert != "none":
            sensors = generate_constrained_sensors(alert, rng, season)
        else:
            sensors = generate_risk_based_sensors(category, risk, rng)
        location = sample_location(season, rng)
        drainage = C.DRAINAGE_STATES[int(rng.choice(3, p=C.DRAINAGE_PROBS[risk]))]
        colocated = min(int(rng.poisson(C.COLOCATED_LAMBDA[risk])), C.COLOCATED_MAX)
        drafts.append((timestamp, i, category, season, location, sensors, alert, pre_alert, drainage, colocated, risk))

    if order == "timestamp":
        drafts.sort(key=lambda d: (d[0], d[1]))
    window = TemporalWindow()
    records = []
    for rid, (ts, _, category, season, location, sensors, alert, pre_alert, drainage, colocated, risk) in enumerate(drafts):
        sensors = enforce_temporal_consistency(sensors, location, ts, window, sigma)
        records.append(
            ReportRecord(rid, ts, category, season, location, sensors, alert, pre_alert, drainage, colocated, risk)
        )
    return records


# ---------------------------------------------------------------- audit


def rule_verdict(record: ReportRecord) -> bool | None:
    """True/False for the record's own alert rule, None when no rule applies."""
    if record.alert == "none":
        return None
    family, severity = C.split_alert(record.alert)
    rule = C.ALERT_RULES[family]
    lo, hi = rule.range_for(severity)
    return lo <= record.sensors[rule.sensor] <= hi


@dataclass
class AuditReport:
    n_records: int
    per_rule: dict[str, dict[str, int]]
    applicable: int
    satisfied: int
    low_risk_with_alert: int
    off_season: int
    illegal_escalation: int
    violations: list[int] = field(default_factory=list)

    @property
    def overall(self) -> float:
        return 100.0 if self.applicable == 0 else 100.0 * self.satisfied / self.applicable

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "overall_pct": round(self.overall, 6),
            "applicable": self.applicable,
            "satisfied": self.satisfied,
            "per_rule": {
                k: {**v, "pct": round(100.0 * v["satisfied"] / v["applicable"], 6) if v["applicable"] else None}
                for k, v in self.per_rule.items()
            },
            "low_risk_with_alert": self.low_risk_with_alert,
            "off_season": self.off_season,
            "illegal_escalation": self.illegal_escalation,
        }


_SEV_RANK = {s: i for i, s in enumerate(C.SEVERITIES)}


def validate_dataset(records: Sequence[ReportRecord]) -> AuditReport:
    """Re-check the alert-weather rules from raw record values.

    ``overall`` covers the 12 alert rules only; the other counters are
    reported alongside.
    """
    if not records:
        raise ValueError("validate_dataset needs at least one record")
    per_rule = {s: {"applicable": 0, "satisfied": 0} for s in C.ALERT_STATES if s != "none"}
    low_alert = off_season = illegal = 0
    violations = []
    for rec in records:
        verdict = rule_verdict(rec)
        if verdict is not None:
            per_rule[rec.alert]["applicable"] += 1
            if verdict:
                per_rule[rec.alert]["satisfied"] += 1
            else:
                violations.append(rec.id)
        if rec.risk == "low" and (rec.alert != "none" or rec.pre_alert.type != "none"):
            low_alert += 1
        if rec.timestamp.month not in C.SEASON_MONTHS[C.CATEGORIES[rec.category].season]:
            off_season += 1
        _, sev = C.split_alert(rec.alert)
        if _SEV_RANK[rec.pre_alert.severity] > _SEV_RANK[sev]:
            illegal += 1
    applicable = sum(v["applicable"] for v in per_rule.values())
    satisfied = sum(v["satisfied"] for v in per_rule.values())
    return AuditReport(len(records), per_rule, applicable, satisfied, low_alert, off_season, illegal, violations)


# ---------------------------------------------------------------- split


@dataclass
class Split:
    train: list[ReportRecord]
    val: list[ReportRecord]
    test: list[ReportRecord]
    labeled: np.ndarray  # bool mask over ``train``
    index: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None  # positions in the input list

    def arrays(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-record split code (0 train, 1 val, 2 test) and labeled flag."""
        if self.index is None:
            raise ValueError("split carries no record positions")
        split = np.full(n, -1, dtype=np.int64)
        labeled = np.zeros(n, dtype=bool)
        for code, idx in enumerate(self.index):
            split[idx] = code
        labeled[self.index[0][self.labeled]] = True
        return split, labeled


def split_dataset(
    records: Sequence[ReportRecord],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    labeled_ratio: float = 0.2,
    seed: int = 0,
) -> Split:
    """Stratified (category, risk) train/val/test split plus a labeled mask over train."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be 3 non-negative values summing to 1, got {list(ratios)}")
    if not 0 < labeled_ratio <= 1:
        raise ValueError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    strata: dict[tuple[str, str], list[int]] = {}
    for i, rec in enumerate(records):
        strata.setdefault((rec.category, rec.risk), []).append(i)
    for key, idx in strata.items():
        if len(idx) < 3:
            raise ValueError(f"stratum {key[0]}/{key[1]} has only {len(idx)} record(s); need >= 3")

    rng = np.random.default_rng(seed)
    train_idx, val_idx, test_idx, labeled_idx = [], [], [], set()
    for key in sorted(strata):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        n = len(idx)
        n_val = int(round(ratios[1] * n))
        n_test = int(round(ratios[2] * n))
        n_train = n - n_val - n_test
        tr = idx[:n_train]
        train_idx.extend(tr.tolist())
        val_idx.extend(idx[n_train:n_train + n_val].tolist())
        test_idx.extend(idx[n_train + n_val:].tolist())
        n_lab = min(n_train, max(1, int(round(labeled_ratio * n_train)))) if n_train else 0
        labeled_idx.update(tr[:n_lab].tolist())

    train_idx.sort()
    val_idx.sort()
    test_idx.sort()
    labeled = np.array([i in labeled_idx for i in train_idx], dtype=bool)
    return Split(
        [records[i] for i in train_idx],
        [records[i] for i in val_idx],
        [records[i] for i in test_idx],
        labeled,
        (np.array(train_idx, dtype=np.int64), np.array(val_idx, dtype=np.int64), np.array(test_idx, dtype=np.int64)),
    )


# ---------------------------------------------------------------- files


def dumps_records(records: Iterable[ReportRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), separators=(",", ":")) + "\n" for r in records)


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_dataset(records: Sequence[ReportRecord], path: str | Path, meta: dict | None = None) -> dict:
    """Write NDJSON records and the adjacent metadata file; return the metadata."""
    import hashlib

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = dumps_records(records).encode("utf-8")
    path.write_bytes(blob)
    audit = validate_dataset(records)
    counts = {
        "records": len(records),
        "risk": {r: sum(1 for x in records if x.risk == r) for r in C.RISKS},
        "category": {c: sum(1 for x in records if x.category == c) for c in C.CATEGORY_NAMES},
    }
    full = {
        **(meta or {}),
        "config_hash": C.config_hash(),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "counts": counts,
        "audit": audit.to_dict(),
    }
    meta_path(path).write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return full


def read_dataset(path: str | Path) -> list[ReportRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ReportRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
