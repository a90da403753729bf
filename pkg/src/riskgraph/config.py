"""Domain tables shared by the generator, the graph encoder and the pruner.

Everything the generator draws from lives here so that a dataset's
metadata can carry a single hash of the configuration that produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

SENSORS = (
    "rainfall",
    "temperature",
    "apparent_temp",
    "humidity",
    "wind",
    "snowfall",
    "pm",
)

SENSOR_UNITS = {
    "rainfall": "mm",
    "temperature": "degC",
    "apparent_temp": "degC",
    "humidity": "%",
    "wind": "m/s",
    "snowfall": "cm",
    "pm": "ug/m3",
}

# Generator clamp and normalisation scale.
SENSOR_BOUNDS = {
    "rainfall": (0.0, 150.0),
    "temperature": (-25.0, 40.0),
    "apparent_temp": (-30.0, 45.0),
    "humidity": (0.0, 100.0),
    "wind": (0.0, 50.0),
    "snowfall": (0.0, 100.0),
    "pm": (0.0, 800.0),
}

SEASONS = ("spring", "summer", "autumn", "winter")
SEASON_MONTHS = {
    "spring": (3, 4, 5),
    "summer": (6, 7, 8),
    "autumn": (9, 10, 11),
    "winter": (12, 1, 2),
}

RISKS = ("low", "medium", "high")
SEVERITIES = ("none", "advisory", "warning")
DRAINAGE_STATES = ("normal", "partially_blocked", "blocked")


@dataclass(frozen=True)
class AlertRule:
    alert_type: str
    sensor: str
    advisory_range: tuple[float, float]
    warning_range: tuple[float, float]
    # +1 when the hazard grows with the reading, -1 for cold hazards.
    direction: int = 1

    def range_for(self, severity: str) -> tuple[float, float]:
        if severity == "advisory":
            return self.advisory_range
        if severity == "warning":
            return self.warning_range
        raise ValueError(f"no range for severity {severity!r}")


ALERT_RULES = {
    rule.alert_type: rule
    for rule in (
        AlertRule("heavy_rain", "rainfall", (60.0, 90.0), (90.0, 150.0)),
        AlertRule("heat_wave", "temperature", (30.0, 35.0), (35.0, 40.0)),
        AlertRule("cold_wave", "temperature", (-20.0, -10.0), (-25.0, -15.0), direction=-1),
        AlertRule("heavy_snow", "snowfall", (20.0, 50.0), (50.0, 100.0)),
        AlertRule("yellow_dust", "pm", (200.0, 400.0), (400.0, 800.0)),
        AlertRule("typhoon", "wind", (20.0, 35.0), (35.0, 50.0)),
    )
}

ALERT_FAMILIES = tuple(ALERT_RULES)

# 12 typed advisories/warnings plus "none"; index order is the one-hot order.
ALERT_STATES = ("none",) + tuple(
    f"{family}_{severity}" for family in ALERT_FAMILIES for severity in ("advisory", "warning")
)


def split_alert(state: str) -> tuple[str | None, str]:
    """Return (family, severity) for an alert state; ("none" -> (None, "none"))."""
    if state == "none":
        return None, "none"
    if state not in ALERT_STATES:
        raise ValueError(f"unknown alert state {state!r}")
    family, severity = state.rsplit("_", 1)
    return family, severity


def alert_state(family: str, severity: str) -> str:
    state = f"{family}_{severity}"
    if state not in ALERT_STATES:
        raise ValueError(f"unknown alert state {state!r}")
    return state


PRE_ALERT_LEAD_HOURS = (1, 2, 3, 6, 12, 24)


@dataclass(frozen=True)
class Category:
    name: str
    label: str
    season: str
    # (sensor, hazard direction) pairs from the "Primary Sensor" column.
    primary: tuple[tuple[str, int], ...]
    alert_families: tuple[str, ...]


CATEGORIES = {
    c.name: c
    for c in (
        Category("yellow_dust_report", "Yellow Dust", "spring", (("pm", 1),), ("yellow_dust",)),
        Category("fine_dust_report", "Fine Dust", "spring", (("pm", 1),), ("yellow_dust",)),
        Category(
            "wildfire_prevention", "Wildfire", "spring", (("humidity", -1), ("wind", 1)), ("typhoon",)
        ),
        Category("drainage_maintenance", "Drainage Maint.", "summer", (("rainfall", 1),), ("heavy_rain",)),
        Category("landslide_risk", "Landslide", "summer", (("rainfall", 1),), ("heavy_rain",)),
        Category("heat_wave", "Heat Wave", "summer", (("temperature", 1),), ("heat_wave",)),
        Category("flood_prevention", "Flood Prev.", "summer", (("rainfall", 1),), ("heavy_rain",)),
        Category("leaf_cleanup", "Leaf Cleanup", "autumn", (("rainfall", 1),), ("heavy_rain",)),
        Category("heavy_snow", "Heavy Snow", "winter", (("snowfall", 1),), ("heavy_snow",)),
        Category(
            "road_icing_prevention",
            "Road Icing",
            "winter",
            (("snowfall", 1), ("temperature", -1)),
            ("heavy_snow", "cold_wave"),
        ),
        Category(
            "cold_wave",
            "Cold Wave",
            "winter",
            (("snowfall", 1), ("temperature", -1)),
            ("heavy_snow", "cold_wave"),
        ),
    )
}

CATEGORY_NAMES = tuple(CATEGORIES)


@dataclass(frozen=True)
class District:
    name: str
    lat: float
    lon: float
    region: int


DISTRICTS = {
    d.name: d
    for d in (
        District("jongno", 37.5735, 126.9790, 0),
        District("mapo", 37.5663, 126.9019, 0),
        District("eunpyeong", 37.6027, 126.9291, 0),
        District("gangnam", 37.5172, 127.0473, 1),
        District("songpa", 37.5145, 127.1059, 1),
        District("gangdong", 37.5301, 127.1238, 1),
        District("guro", 37.4954, 126.8874, 2),
        District("gwanak", 37.4784, 126.9516, 2),
        District("yangcheon", 37.5170, 126.8665, 2),
    )
}

DISTRICT_NAMES = tuple(DISTRICTS)

# Truncated-normal (mean, sd) for sensors not governed by an alert.
# apparent_temp is derived from temperature/humidity/wind instead.
SEASONAL_BASELINES = {
    "spring": {"rainfall": (5.0, 6.0), "temperature": (13.0, 6.0), "humidity": (55.0, 15.0),
               "wind": (4.0, 2.5), "snowfall": (0.0, 0.0), "pm": (40.0, 20.0)},
    "summer": {"rainfall": (15.0, 15.0), "temperature": (27.0, 4.0), "humidity": (75.0, 12.0),
               "wind": (3.0, 2.0), "snowfall": (0.0, 0.0), "pm": (20.0, 10.0)},
    "autumn": {"rainfall": (6.0, 8.0), "temperature": (15.0, 6.0), "humidity": (60.0, 15.0),
               "wind": (3.5, 2.0), "snowfall": (0.0, 0.0), "pm": (30.0, 15.0)},
    "winter": {"rainfall": (1.0, 2.0), "temperature": (-2.0, 6.0), "humidity": (50.0, 15.0),
               "wind": (4.0, 2.5), "snowfall": (3.0, 4.0), "pm": (45.0, 20.0)},
}

# Hazard onset used by the risk-graded sampler for sensors without an
# alert rule in that direction (dry air for wildfires).
HAZARD_ONSET = {
    ("rainfall", 1): 60.0,
    ("temperature", 1): 30.0,
    ("temperature", -1): -10.0,
    ("snowfall", 1): 20.0,
    ("pm", 1): 200.0,
    ("wind", 1): 20.0,
    ("humidity", -1): 25.0,
}

# Fraction of the way from the seasonal mean to the hazard onset, per risk.
RISK_HAZARD_FRACTION = {"low": 0.4, "medium": 0.85, "high": 1.2}

COLOCATED_LAMBDA = {"low": 1.0, "medium": 3.0, "high": 6.0}
COLOCATED_MAX = 20

DRAINAGE_PROBS = {
    "low": (0.7, 0.2, 0.1),
    "medium": (0.5, 0.3, 0.2),
    "high": (0.3, 0.35, 0.35),
}

# Probabilities of (direct, pre-alert then alert, escalation).
SCENARIO_PROBS = (1 / 3, 1 / 3, 1 / 3)

# Relative hour-of-day weights: a mild daytime bump.
DIURNAL_WEIGHTS = tuple(0.6 if h < 6 else 1.0 if h < 9 else 1.3 if h < 19 else 0.9 for h in range(24))

TEMPORAL_SIGMA = 0.15
TEMPORAL_ZERO_EPS = 1e-6
WINDOW_HOURS = 24

# Node-type vocabulary of the graph.
CONTEXT_TYPES = ("weather_alert", "pre_alert_type", "pre_alert_time", "pre_alert_severity", "drainage")
STRUCTURAL_TYPES = ("location", "report_count", "report_type")
NEIGHBOR_TYPES = SENSORS + CONTEXT_TYPES + STRUCTURAL_TYPES
NODE_TYPES = NEIGHBOR_TYPES + ("report",)
ELIGIBLE_TYPES = SENSORS + CONTEXT_TYPES

REPORT_COUNT_BINS = ((0, 0), (1, 2), (3, 5), (6, 10), (11, None))
REPORT_TYPE_EMBED_DIM = 8


def default_config() -> dict:
    """The generator configuration as a JSON-serialisable dict."""
    return {
        "sensor_bounds": {k: list(v) for k, v in SENSOR_BOUNDS.items()},
        "season_months": {k: list(v) for k, v in SEASON_MONTHS.items()},
        "alert_rules": {
            k: {"sensor": r.sensor, "advisory": list(r.advisory_range),
                "warning": list(r.warning_range), "direction": r.direction}
            for k, r in ALERT_RULES.items()
        },
        "categories": {
            k: {"season": c.season, "primary": [list(p) for p in c.primary],
                "alert_families": list(c.alert_families)}
            for k, c in CATEGORIES.items()
        },
        "districts": {k: [d.lat, d.lon, d.region] for k, d in DISTRICTS.items()},
        "seasonal_baselines": {s: {k: list(v) for k, v in b.items()} for s, b in SEASONAL_BASELINES.items()},
        "hazard_onset": {f"{s}:{d}": v for (s, d), v in HAZARD_ONSET.items()},
        "risk_hazard_fraction": RISK_HAZARD_FRACTION,
        "colocated_lambda": COLOCATED_LAMBDA,
        "colocated_max": COLOCATED_MAX,
        "drainage_probs": {k: list(v) for k, v in DRAINAGE_PROBS.items()},
        "scenario_probs": list(SCENARIO_PROBS),
        "diurnal_weights": list(DIURNAL_WEIGHTS),
        "pre_alert_lead_hours": list(PRE_ALERT_LEAD_HOURS),
        "temporal_sigma": TEMPORAL_SIGMA,
        "temporal_zero_eps": TEMPORAL_ZERO_EPS,
        "window_hours": WINDOW_HOURS,
    }


def stable_hash(obj) -> str:
    """sha256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


def config_hash() -> str:
    return stable_hash(default_config())
