"""Anchor records that give a lone incoming report some graph context."""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from . import graph as G
from .synthgen import PreAlert, ReportRecord

STRATEGIES = ("single_node", "synthetic", "median", "coverage")
_LO = np.array([C.SENSOR_BOUNDS[s][0] for s in C.SENSORS])
_HI = np.array([C.SENSOR_BOUNDS[s][1] for s in C.SENSORS])


def sensor_matrix(records: Sequence[ReportRecord]) -> np.ndarray:
    """Sensor readings scaled to [0, 1] by the physical bounds, one row per record."""
    raw = np.array([[r.sensors[s] for s in C.SENSORS] for r in records], dtype=float)
    return (raw - _LO) / (_HI - _LO)


def _of_category(train, category):
    recs = [r for r in train if r.category == category]
    if not recs:
        raise ValueError(f"no training records of category {category!r}")
    return recs


def median_index(points: np.ndarray) -> int:
    """Row nearest (Euclidean) to the per-column median; first row wins ties."""
    med = np.median(points, axis=0)
    return int(np.argmin(np.linalg.norm(points - med, axis=1)))


def farthest_point_sampling(points: np.ndarray, k: int, seed_index: int) -> list[int]:
    """Greedy max-min picks starting from ``seed_index``; stops early if only duplicates remain."""
    picks = [seed_index]
    dist = np.linalg.norm(points - points[seed_index], axis=1)
    while len(picks) < k:
        nxt = int(np.argmax(dist))
        if dist[nxt] <= 0.0:
            break
        picks.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return picks


def build_median_anchor(train: Sequence[ReportRecord], category: str) -> ReportRecord:
    recs = _of_category(train, category)
    return recs[median_index(sensor_matrix(recs))]


def build_coverage_anchors(train: Sequence[ReportRecord], category: str, k: int = 5):
    """(anchors, shortfall): FPS picks seeded at the median anchor."""
    recs = _of_category(train, category)
    pts = sensor_matrix(recs)
    picks = farthest_point_sampling(pts, k, median_index(pts))
    return [recs[i] for i in picks], max(0, k - len(picks))


# ---------------------------------------------------------------- synthetic


@dataclass
class Prototype:
    """Diagonal Gaussian over sensors plus empirical categorical frequencies."""

    mean: list[float]
    var: list[float]
    # joint (risk, alert, pre_alert type, lead, severity) keeps alert sequences legal
    alert_states: list[tuple[list, float]]
    drainage: list[tuple[str, float]]
    colocated: list[tuple[int, float]]
    location: list[tuple[str, float]]
    season: str

    def to_dict(self) -> dict:
        return {"mean": self.mean, "var": self.var, "alert_states": self.alert_states,
                "drainage": self.drainage, "colocated": self.colocated, "location": self.location,
                "season": self.season}

    @classmethod
    def from_dict(cls, d: dict) -> "Prototype":
        return cls(d["mean"], d["var"], [(list(a), p) for a, p in d["alert_states"]],
                   [tuple(x) for x in d["drainage"]], [tuple(x) for x in d["colocated"]],
                   [tuple(x) for x in d["location"]], d["season"])


def _freq(values) -> list:
    counts = Counter(values)
    n = sum(counts.values())
    return [(k, v / n) for k, v in sorted(counts.items(), key=lambda kv: str(kv[0]))]


def fit_prototype(train: Sequence[ReportRecord], category: str) -> Prototype:
    recs = _of_category(train, category)
    raw = np.array([[r.sensors[s] for s in C.SENSORS] for r in recs], dtype=float)
    states = _freq(tuple([r.risk, r.alert, r.pre_alert.type, r.pre_alert.lead_time, r.pre_alert.severity])
                   for r in recs)
    return Prototype(
        mean=raw.mean(axis=0).tolist(),
        var=raw.var(axis=0).tolist(),
        alert_states=[(list(k), p) for k, p in states],
        drainage=_freq(r.drainage for r in recs),
        colocated=_freq(r.colocated_count for r in recs),
        location=_freq(r.location for r in recs),
        season=recs[0].season,
    )


def _draw(rng, table):
    probs = np.array([p for _, p in table], dtype=float)
    return table[int(rng.choice(len(table), p=probs / probs.sum()))][0]


def sample_sensors(proto: Prototype, rng: np.random.Generator, alert: str = "none", steps: int = 400) -> np.ndarray:
    """Random-walk Metropolis draw from the prototype Gaussian truncated to the feasible box.

    The box is the physical bounds intersected, for the governed sensor,
    with the alert's range. The chain starts at the mean projected into
    the box; zero-variance coordinates never move.
    """
    mean = np.asarray(proto.mean, dtype=float)
    sd = np.sqrt(np.asarray(proto.var, dtype=float))
    lo, hi = _LO.copy(), _HI.copy()
    if alert != "none":
        family, severity = C.split_alert(alert)
        rule = C.ALERT_RULES[family]
        j = C.SENSORS.index(rule.sensor)
        rlo, rhi = rule.range_for(severity)
        lo[j], hi[j] = max(lo[j], rlo), min(hi[j], rhi)
    x = np.clip(mean, lo, hi)
    moving = sd > 0
    if not moving.any():
        return x
    step = 0.5 * np.where(moving, sd, 0.0)

    def logp(v):
        z = np.where(moving, (v - mean) / np.where(moving, sd, 1.0), 0.0)
        return -0.5 * float(z @ z)

    cur = logp(x)
    for _ in range(steps):
        prop = x + step * rng.standard_normal(len(x))
        if np.any(prop < lo) or np.any(prop > hi):
            continue
        new = logp(prop)
        if np.log(rng.random()) < new - cur:
            x, cur = prop, new
    return x


def build_synthetic_anchor(proto: Prototype | None, category: str, rng: np.random.Generator,
                           steps: int = 400) -> ReportRecord:
    """Generate one anchor record from a fitted prototype at request time."""
    if proto is None:
        raise ValueError(f"no fitted prototype for category {category!r}")
    risk, alert, pa_type, lead, pa_sev = _draw(rng, proto.alert_states)
    values = sample_sensors(proto, rng, alert, steps)
    return ReportRecord(
        id=-1,
        timestamp=_anchor_time(proto.season),
        category=category,
        season=proto.season,
        location=_draw(rng, proto.location),
        sensors={s: float(v) for s, v in zip(C.SENSORS, values)},
        alert=alert,
        pre_alert=PreAlert(pa_type, int(lead), pa_sev),
        drainage=_draw(rng, proto.drainage),
        colocated_count=int(_draw(rng, proto.colocated)),
        risk=risk,
    )


def _anchor_time(season: str):
    from datetime import datetime

    return datetime(2000, C.SEASON_MONTHS[season][0], 1, 12, 0)


# ---------------------------------------------------------------- anchor sets


@dataclass
class AnchorSet:
    strategy: str
    anchors: dict[str, list[ReportRecord]] = field(default_factory=dict)
    prototypes: dict[str, Prototype] = field(default_factory=dict)
    shortfall: dict[str, int] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "anchors": {c: [r.to_dict() for r in rs] for c, rs in sorted(self.anchors.items())},
            "prototypes": {c: p.to_dict() for c, p in sorted(self.prototypes.items())},
            "shortfall": dict(sorted(self.shortfall.items())),
            "provenance": self.provenance,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSet":
        return cls(
            d["strategy"],
            {c: [ReportRecord.from_dict(r) for r in rs] for c, rs in d["anchors"].items()},
            {c: Prototype.from_dict(p) for c, p in d["prototypes"].items()},
            {c: int(v) for c, v in d.get("shortfall", {}).items()},
            d.get("provenance", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "AnchorSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_anchor_set(strategy: str, train: Sequence[ReportRecord], quantizers=None, k: int = 5) -> AnchorSet:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown anchor strategy {strategy!r}")
    provenance = {"train_hash": C.stable_hash([r.to_dict() for r in train])}
    if quantizers is not None:
        provenance["quantizers"] = G.quantizers_hash(quantizers)
    aset = AnchorSet(strategy, provenance=provenance)
    cats = sorted({r.category for r in train})
    for c in cats:
        if strategy == "single_node":
            aset.anchors[c] = []
        elif strategy == "median":
            aset.anchors[c] = [build_median_anchor(train, c)]
        elif strategy == "coverage":
            picks, short = build_coverage_anchors(train, c, k)
            aset.anchors[c] = picks
            if short:
                aset.shortfall[c] = short
        else:
            aset.prototypes[c] = fit_prototype(train, c)
    return aset


def assemble_inference_graph(report: ReportRecord, anchor_set: AnchorSet, quantizers,
                             rng: np.random.Generator | None = None) -> G.HeteroGraph:
    """The report's star plus its category's anchor stars; only the report is scored."""
    c = report.category
    if anchor_set.strategy == "synthetic":
        if c not in anchor_set.prototypes:
            raise ValueError(f"anchor set has no prototype for category {c!r}")
        anchors = [build_synthetic_anchor(anchor_set.prototypes[c], c, rng or np.random.default_rng(report.id))]
    else:
        if c not in anchor_set.anchors:
            raise ValueError(f"anchor set has no entry for category {c!r}")
        anchors = anchor_set.anchors[c]
    g = G.build_graph([report] + list(anchors), quantizers, with_labels=False)
    g.target = np.zeros(g.n_reports, dtype=bool)
    g.target[0] = True
    return g


def infer_report(report: ReportRecord, anchor_set: AnchorSet, quantizers, params, cfg,
                 rng: np.random.Generator | None = None) -> dict:
    """Risk, class probabilities and importance for one incoming report."""
    from . import explain as E
    from . import models as M

    t0 = time.perf_counter()
    g = assemble_inference_graph(report, anchor_set, quantizers, rng)
    out = M.variant_forward(cfg.variant, params, g, train=False, n_heads=cfg.heads)
    logits = out.logits.value[0]
    latency = (time.perf_counter() - t0) * 1000.0
    if cfg.variant == "inductive":
        vec = E.gradient_importance(cfg.variant, params, g, anchor_set.strategy, n_heads=cfg.heads)[0]
    else:
        vec = E.attention_importance(out, g, cfg.variant, anchor_set.strategy)[0]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return {
        "risk": C.RISKS[int(np.argmax(logits))],
        "probabilities": {r: round(float(v), 6) for r, v in zip(C.RISKS, p)},
        "importance": {t: round(v, 4) for t, v in vec.scores.items()},
        "top1": vec.top1(),
        "latency_ms": round(latency, 3),
    }

