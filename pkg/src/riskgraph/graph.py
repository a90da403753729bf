"""Node encoding and heterogeneous graph assembly.

Every report is the centre of a star: one neighbour node per neighbour
type, instantiated per report, except location nodes which are shared by
all reports in a district and linked pairwise within a region.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import config as C
from .synthgen import ReportRecord

FEATURE_DIMS = {
    **{s: 6 for s in C.SENSORS},
    "weather_alert": len(C.ALERT_STATES),
    "pre_alert_type": len(C.ALERT_STATES),
    "pre_alert_time": len(C.PRE_ALERT_LEAD_HOURS),
    # three levels (none, advisory, warning) so every severity is representable
    "pre_alert_severity": len(C.SEVERITIES),
    "drainage": len(C.DRAINAGE_STATES),
    "location": 4,
    "report_count": len(C.REPORT_COUNT_BINS),
    "report": 1,
    "report_type": 1,
}

ENCODING_KIND = {
    **{s: "binned+norm" for s in C.SENSORS},
    "weather_alert": "one-hot",
    "pre_alert_type": "one-hot",
    "pre_alert_time": "one-hot",
    "pre_alert_severity": "one-hot",
    "drainage": "one-hot",
    "location": "coordinate",
    "report_count": "one-hot",
    "report": "id",
    "report_type": "embedding-index",
}

LOCATION_REL = ("location", "adjacent", "location")


def forward_rel(t: str) -> tuple[str, str, str]:
    return ("report", f"has_{t}", t)


def reverse_rel(t: str) -> tuple[str, str, str]:
    return (t, f"{t}_of", "report")


def relations() -> list[tuple[str, str, str]]:
    """Every relation of the schema, in a fixed order."""
    rels = [forward_rel(t) for t in C.NEIGHBOR_TYPES]
    rels += [reverse_rel(t) for t in C.NEIGHBOR_TYPES]
    rels.append(LOCATION_REL)
    return rels


def rel_name(rel: tuple[str, str, str]) -> str:
    return "__".join(rel)


# ---------------------------------------------------------------- quantizers


@dataclass(frozen=True)
class Quantizer:
    boundaries: tuple[float, float, float, float]
    lo: float
    hi: float

    def bin(self, value):
        return np.searchsorted(np.asarray(self.boundaries), value, side="right")

    def norm(self, value):
        return np.clip((np.asarray(value, dtype=float) - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def fit_quantizers(train: Sequence[ReportRecord]) -> dict[str, Quantizer]:
    """Percentile bin boundaries per sensor; normalisation uses the physical bounds."""
    out = {}
    for sensor in C.SENSORS:
        values = np.array([r.sensors[sensor] for r in train], dtype=float)
        distinct = np.unique(values)
        if len(distinct) < 5:
            raise ValueError(f"sensor {sensor!r} has {len(distinct)} distinct training values; need >= 5")
        bounds = np.percentile(values, [20, 40, 60, 80])
        if not np.all(np.diff(bounds) > 0):
            # heavy ties (snowfall is 0 outside winter): fall back to the distinct values
            bounds = np.percentile(distinct, [20, 40, 60, 80])
        lo, hi = C.SENSOR_BOUNDS[sensor]
        out[sensor] = Quantizer(tuple(float(b) for b in bounds), lo, hi)
    return out


def quantizers_to_dict(q: dict[str, Quantizer]) -> dict:
    return {s: {"boundaries": list(v.boundaries), "bounds": [v.lo, v.hi]} for s, v in q.items()}


def quantizers_from_dict(d: dict) -> dict[str, Quantizer]:
    return {s: Quantizer(tuple(v["boundaries"]), v["bounds"][0], v["bounds"][1]) for s, v in d.items()}


def quantizers_hash(q: dict[str, Quantizer]) -> str:
    return C.stable_hash(quantizers_to_dict(q))


# ---------------------------------------------------------------- encoding

_ALERT_INDEX = {s: i for i, s in enumerate(C.ALERT_STATES)}
_SEV_INDEX = {s: i for i, s in enumerate(C.SEVERITIES)}
_DRAIN_INDEX = {s: i for i, s in enumerate(C.DRAINAGE_STATES)}
_CAT_INDEX = {c: i for i, c in enumerate(C.CATEGORY_NAMES)}

_LATS = np.array([d.lat for d in C.DISTRICTS.values()])
_LONS = np.array([d.lon for d in C.DISTRICTS.values()])
_CENTER = (_LATS.mean(), _LONS.mean())
_MAX_DIST = float(np.max(np.hypot(_LATS - _CENTER[0], _LONS - _CENTER[1])))


def lead_time_bin(hours) -> np.ndarray:
    """Bins {<=1, 2, 3, 4-6, 7-12, >12} h; -1 for "no pre-alert" (0 h)."""
    h = np.asarray(hours)
    if np.any(h < 0):
        raise ValueError("lead time must be >= 0")
    b = np.searchsorted(np.array([1, 2, 3, 6, 12]), h, side="left")
    return np.where(h == 0, -1, b)


def report_count_bin(count) -> np.ndarray:
    c = np.asarray(count)
    if np.any(c < 0):
        raise ValueError("co-located count must be >= 0")
    return np.searchsorted(np.array([0, 2, 5, 10]), c, side="left")


def location_features(district: str) -> np.ndarray:
    if district not in C.DISTRICTS:
        raise ValueError(f"unknown district {district!r}")
    d = C.DISTRICTS[district]
    return np.array([
        (d.lat - _LATS.min()) / (_LATS.max() - _LATS.min()),
        (d.lon - _LONS.min()) / (_LONS.max() - _LONS.min()),
        d.region / 2.0,
        float(np.hypot(d.lat - _CENTER[0], d.lon - _CENTER[1])) / _MAX_DIST,
    ])


def _one_hot(idx: np.ndarray, width: int) -> np.ndarray:
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (width,))
    valid = idx >= 0
    out[np.nonzero(valid)[0], idx[valid]] = 1.0
    return out


def _lookup(vocab: dict[str, int], values, what: str) -> np.ndarray:
    try:
        return np.array([vocab[v] for v in values], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unknown {what} {exc.args[0]!r}") from None


def encode_column(node_type: str, values: Sequence, quantizers: dict[str, Quantizer] | None = None) -> np.ndarray:
    """Encode many raw values of one node type; rows follow ``values``."""
    if node_type in C.SENSORS:
        if quantizers is None:
            raise ValueError("sensor encoding needs fitted quantizers")
        q = quantizers[node_type]
        v = np.asarray(values, dtype=float)
        return np.concatenate([_one_hot(q.bin(v), 5), q.norm(v)[:, None]], axis=1)
    if node_type in ("weather_alert", "pre_alert_type"):
        return _one_hot(_lookup(_ALERT_INDEX, values, "alert state"), len(C.ALERT_STATES))
    if node_type == "pre_alert_time":
        return _one_hot(lead_time_bin(np.asarray(values, dtype=int)), len(C.PRE_ALERT_LEAD_HOURS))
    if node_type == "pre_alert_severity":
        return _one_hot(_lookup(_SEV_INDEX, values, "severity"), len(C.SEVERITIES))
    if node_type == "drainage":
        return _one_hot(_lookup(_DRAIN_INDEX, values, "drainage state"), len(C.DRAINAGE_STATES))
    if node_type == "location":
        return np.stack([location_features(v) for v in values]) if len(values) else np.zeros((0, 4))
    if node_type == "report_count":
        return _one_hot(report_count_bin(np.asarray(values, dtype=int)), len(C.REPORT_COUNT_BINS))
    if node_type == "report":
        return np.ones((len(values), 1))
    if node_type == "report_type":
        return _lookup(_CAT_INDEX, values, "category").astype(float)[:, None]
    raise ValueError(f"unknown node type {node_type!r}")


def encode_node(node_type: str, value, quantizers: dict[str, Quantizer] | None = None) -> np.ndarray:
    """Feature vector of a single node."""
    return encode_column(node_type, [value], quantizers)[0]


def raw_value(record: ReportRecord, node_type: str):
    if node_type in C.SENSORS:
        return record.sensors[node_type]
    return {
        "weather_alert": lambda r: r.alert,
        "pre_alert_type": lambda r: r.pre_alert.type,
        "pre_alert_time": lambda r: r.pre_alert.lead_time,
        "pre_alert_severity": lambda r: r.pre_alert.severity,
        "drainage": lambda r: r.drainage,
        "location": lambda r: r.location,
        "report_count": lambda r: r.colocated_count,
        "report": lambda r: r.id,
        "report_type": lambda r: r.category,
    }[node_type](record)


# ---------------------------------------------------------------- graph


class PruneLike(Protocol):
    def retained(self, category: str, risk: str) -> frozenset[str]: ...


@dataclass
class HeteroGraph:
    x: dict[str, np.ndarray]
    edges: dict[tuple[str, str, str], np.ndarray]
    y: np.ndarray  # risk index per report, -1 when unknown
    category: np.ndarray  # category index per report
    record_ids: np.ndarray
    labeled: np.ndarray  # bool per report
    split: np.ndarray  # 0 train, 1 val, 2 test, -1 none
    target: np.ndarray  # bool per report: scored node(s)
    region: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # per location node
    provenance: dict = field(default_factory=dict)
    _star: dict | None = field(default=None, repr=False, compare=False)

    @property
    def n_reports(self) -> int:
        return len(self.y)

    def num_nodes(self, node_type: str) -> int:
        arr = self.x.get(node_type)
        return 0 if arr is None else len(arr)

    def star_index(self) -> dict[str, np.ndarray]:
        """Per neighbour type, the neighbour node of each report (-1 if absent)."""
        if self._star is None:
            star = {}
            for t in C.NEIGHBOR_TYPES:
                idx = np.full(self.n_reports, -1, dtype=np.int64)
                e = self.edges.get(forward_rel(t))
                if e is not None and e.shape[1]:
                    if len(np.unique(e[0])) != e.shape[1]:
                        raise ValueError(f"report has more than one {t} neighbour")
                    idx[e[0]] = e[1]
                star[t] = idx
            self._star = star
        return self._star

    def validate(self) -> None:
        for (s, r, d), e in self.edges.items():
            if e.ndim != 2 or e.shape[0] != 2:
                raise ValueError(f"edge array for {r} must be 2xE")
            if e.size and (e[0].min() < 0 or e[0].max() >= self.num_nodes(s)
                           or e[1].min() < 0 or e[1].max() >= self.num_nodes(d)):
                raise ValueError(f"edge endpoint out of range in relation {r}")


def _region_partners(district: str) -> list[str]:
    region = C.DISTRICTS[district].region
    return [d for d in C.DISTRICT_NAMES if C.DISTRICTS[d].region == region]


def build_graph(
    records: Sequence[ReportRecord],
    quantizers: dict[str, Quantizer],
    prune_spec: PruneLike | None = None,
    *,
    split: np.ndarray | None = None,
    labeled: np.ndarray | None = None,
    with_labels: bool = True,
) -> HeteroGraph:
    """Assemble the heterogeneous graph for ``records``.

    ``prune_spec`` removes, per record, the neighbour types it does not
    retain for that record's (category, risk).
    """
    if not records:
        raise ValueError("build_graph needs at least one record")
    for r in records:
        if r.location not in C.DISTRICTS:
            raise ValueError(f"record {r.id} references unknown district {r.location!r}")
    n = len(records)

    keep = {t: np.ones(n, dtype=bool) for t in C.NEIGHBOR_TYPES}
    if prune_spec is not None:
        for i, r in enumerate(records):
            retained = prune_spec.retained(r.category, r.risk)
            for t in C.NEIGHBOR_TYPES:
                if t not in retained:
                    keep[t][i] = False

    x: dict[str, np.ndarray] = {"report": np.ones((n, 1), dtype=np.float32)}
    edges: dict[tuple[str, str, str], np.ndarray] = {}
    report_idx = np.arange(n, dtype=np.int64)

    # shared location nodes: every district of every touched region, gazetteer order
    touched = {C.DISTRICTS[r.location].region for r in records}
    districts = [d for d in C.DISTRICT_NAMES if C.DISTRICTS[d].region in touched]
    loc_index = {d: i for i, d in enumerate(districts)}
    x["location"] = encode_column("location", districts).astype(np.float32)
    region = np.array([C.DISTRICTS[d].region for d in districts], dtype=np.int64)

    for t in C.NEIGHBOR_TYPES:
        rows = report_idx[keep[t]]
        if t == "location":
            dst = np.array([loc_index[records[i].location] for i in rows], dtype=np.int64)
        else:
            vals = [raw_value(records[i], t) for i in rows]
            x[t] = encode_column(t, vals, quantizers).astype(np.float32).reshape(len(rows), FEATURE_DIMS[t])
            dst = np.arange(len(rows), dtype=np.int64)
        edges[forward_rel(t)] = np.stack([rows, dst])
        edges[reverse_rel(t)] = np.stack([dst, rows])

    src, dst = [], []
    for i, a in enumerate(districts):
        for j, b in enumerate(districts):
            if i != j and region[i] == region[j]:
                src.append(i)
                dst.append(j)
    edges[LOCATION_REL] = np.array([src, dst], dtype=np.int64).reshape(2, -1)

    y = np.array([C.RISKS.index(r.risk) if with_labels else -1 for r in records], dtype=np.int64)
    g = HeteroGraph(
        x=x,
        edges=edges,
        y=y,
        category=np.array([_CAT_INDEX[r.category] for r in records], dtype=np.int64),
        record_ids=np.array([r.id for r in records], dtype=np.int64),
        labeled=np.ones(n, dtype=bool) if labeled is None else np.asarray(labeled, dtype=bool),
        split=np.full(n, -1, dtype=np.int64) if split is None else np.asarray(split, dtype=np.int64),
        target=np.ones(n, dtype=bool),
        region=region,
        provenance={
            "quantizers": quantizers_hash(quantizers),
            "prune_spec": getattr(prune_spec, "hash", None) or ("original" if prune_spec is None else "custom"),
            "pre_alert_severity_dim": FEATURE_DIMS["pre_alert_severity"],
        },
    )
    g.validate()
    return g


def content_hash(graph: HeteroGraph) -> str:
    h = hashlib.sha256()
    for t in sorted(graph.x):
        h.update(t.encode())
        h.update(np.ascontiguousarray(graph.x[t], dtype="<f4").tobytes())
    for rel in sorted(graph.edges):
        h.update(rel_name(rel).encode())
        h.update(np.ascontiguousarray(graph.edges[rel], dtype="<i8").tobytes())
    for arr in (graph.y, graph.category, graph.record_ids, graph.labeled, graph.split, graph.target):
        h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    return h.hexdigest()


def graph_stats(graph: HeteroGraph) -> dict:
    """Node and directed-edge counts with stable ordering."""
    nodes = {t: graph.num_nodes(t) for t in C.NODE_TYPES}
    edges = {rel_name(rel): int(graph.edges[rel].shape[1]) if rel in graph.edges else 0 for rel in relations()}
    report_edges = sum(v for k, v in edges.items() if k != rel_name(LOCATION_REL))
    stats = {
        "nodes": nodes,
        "edges": edges,
        "total_nodes": sum(nodes.values()),
        "total_edges": sum(edges.values()),
        "report_edges": report_edges,
        "node_types_present": sum(1 for v in nodes.values() if v),
    }
    stats["hash"] = C.stable_hash(stats)
    return stats


def edge_reduction(original: dict, pruned: dict) -> dict:
    """Percentage reduction of directed edges, total and per relation, at 0.1% resolution."""
    def pct(a, b):
        return round(100.0 * (a - b) / a, 1) if a else 0.0

    return {
        "total_edges": [original["total_edges"], pruned["total_edges"]],
        "total_reduction_pct": pct(original["total_edges"], pruned["total_edges"]),
        "per_relation_pct": {k: pct(v, pruned["edges"].get(k, 0)) for k, v in original["edges"].items()},
    }


# ---------------------------------------------------------------- batching


def report_subgraph(graph: HeteroGraph, reports: np.ndarray, edge_drop: float = 0.0,
                    rng: np.random.Generator | None = None, modality_drop: float = 0.0) -> HeteroGraph:
    """Union of report-centred closed subgraphs.

    Each selected report keeps its star and gets private copies of its
    location and the location's region partners, so no information flows
    between reports of the batch. Two training-only augmentations are
    available: ``edge_drop`` removes each rankable (sensor or context)
    neighbour independently; ``modality_drop`` removes, per report, the
    whole context group with that probability, else the whole sensor
    group with the same probability.
    """
    if (edge_drop or modality_drop) and rng is None:
        raise ValueError("training-time dropping needs an rng")
    if not 0.0 <= modality_drop <= 0.5:
        raise ValueError(f"modality_drop must lie in [0, 0.5], got {modality_drop}")
    reports = np.asarray(reports, dtype=np.int64)
    b = len(reports)
    star = graph.star_index()
    x = {"report": graph.x["report"][reports]}
    edges = {}
    local = np.arange(b, dtype=np.int64)
    drop_group = {}
    if modality_drop:
        u = rng.random(b)
        drop_group = {"context": u < modality_drop, "sensor": (u >= modality_drop) & (u < 2 * modality_drop)}
    for t in C.NEIGHBOR_TYPES:
        if t == "location":
            continue
        nb = star[t][reports]
        if edge_drop and t in C.ELIGIBLE_TYPES:
            nb = np.where(rng.random(b) < edge_drop, -1, nb)
        if drop_group and t in C.ELIGIBLE_TYPES:
            nb = np.where(drop_group["sensor" if t in C.SENSORS else "context"], -1, nb)
        present = nb >= 0
        x[t] = graph.x[t][nb[present]]
        rows = local[present]
        dst = np.arange(len(rows), dtype=np.int64)
        edges[forward_rel(t)] = np.stack([rows, dst])
        edges[reverse_rel(t)] = np.stack([dst, rows])

    # private location triples: own district first, then region partners
    loc = star["location"][reports]
    partners = {}
    for i in range(graph.num_nodes("location")):
        same = np.nonzero(graph.region == graph.region[i])[0]
        partners[i] = [i] + [j for j in same if j != i]
    loc_rows, loc_feat_idx, adj_src, adj_dst, rep_rows, rep_dst = [], [], [], [], [], []
    cursor = 0
    for i, l in enumerate(loc):
        if l < 0:
            continue
        group = partners[int(l)]
        ids = list(range(cursor, cursor + len(group)))
        loc_feat_idx.extend(group)
        rep_rows.append(i)
        rep_dst.append(ids[0])
        for a in ids:
            for c in ids:
                if a != c:
                    adj_src.append(a)
                    adj_dst.append(c)
        cursor += len(group)
    x["location"] = graph.x["location"][np.array(loc_feat_idx, dtype=np.int64)] if loc_feat_idx else np.zeros(
        (0, FEATURE_DIMS["location"]), dtype=graph.x["location"].dtype)
    rr = np.array(rep_rows, dtype=np.int64)
    rd = np.array(rep_dst, dtype=np.int64)
    edges[forward_rel("location")] = np.stack([rr, rd]).reshape(2, -1)
    edges[reverse_rel("location")] = np.stack([rd, rr]).reshape(2, -1)
    edges[LOCATION_REL] = np.array([adj_src, adj_dst], dtype=np.int64).reshape(2, -1)

    return HeteroGraph(
        x=x,
        edges=edges,
        y=graph.y[reports],
        category=graph.category[reports],
        record_ids=graph.record_ids[reports],
        labeled=graph.labeled[reports],
        split=graph.split[reports],
        target=np.ones(b, dtype=bool),
        region=graph.region[np.array(loc_feat_idx, dtype=np.int64)] if loc_feat_idx else np.zeros(0, np.int64),
        provenance=dict(graph.provenance),
    )


# ---------------------------------------------------------------- files


def save_graph(graph: HeteroGraph, out_dir: str | Path) -> dict:
    """Write features, edges, labels and a manifest; return the manifest."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "edges").mkdir(parents=True, exist_ok=True)
    header = {"features": {}, "edges": {}, "arrays": {}}
    for t, arr in sorted(graph.x.items()):
        data = np.ascontiguousarray(arr, dtype="<f4")
        (out / "features" / f"{t}.bin").write_bytes(data.tobytes())
        header["features"][t] = list(data.shape)
    for rel, e in sorted(graph.edges.items()):
        pairs = np.ascontiguousarray(e.T, dtype="<i4")
        (out / "edges" / f"{rel_name(rel)}.bin").write_bytes(pairs.tobytes())
        header["edges"][rel_name(rel)] = int(e.shape[1])
    arrays = {
        "y": graph.y, "category": graph.category, "record_ids": graph.record_ids,
        "labeled": graph.labeled, "split": graph.split, "target": graph.target, "region": graph.region,
    }
    for name, arr in arrays.items():
        (out / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype="<i4").tobytes())
        header["arrays"][name] = len(arr)
    (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    manifest = {
        "content_hash": content_hash(graph),
        "stats": graph_stats(graph),
        "provenance": graph.provenance,
        "encoding": {t: {"kind": ENCODING_KIND[t], "dim": FEATURE_DIMS[t]} for t in C.NODE_TYPES},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_graph(in_dir: str | Path) -> HeteroGraph:
    src = Path(in_dir)
    header = json.loads((src / "header.json").read_text())
    manifest = json.loads((src / "manifest.json").read_text())
    x = {
        t: np.frombuffer((src / "features" / f"{t}.bin").read_bytes(), dtype="<f4").reshape(shape).astype(np.float32)
        for t, shape in header["features"].items()
    }
    edges = {}
    for name, count in header["edges"].items():
        rel = tuple(name.split("__"))
        pairs = np.frombuffer((src / "edges" / f"{name}.bin").read_bytes(), dtype="<i4").reshape(count, 2)
        edges[rel] = pairs.T.astype(np.int64)
    arr = {
        name: np.frombuffer((src / f"{name}.bin").read_bytes(), dtype="<i4").astype(np.int64)
        for name in header["arrays"]
    }
    g = HeteroGraph(
        x=x, edges=edges, y=arr["y"], category=arr["category"], record_ids=arr["record_ids"],
        labeled=arr["labeled"].astype(bool), split=arr["split"], target=arr["target"].astype(bool),
        region=arr["region"], provenance=manifest.get("provenance", {}),
    )
    g.validate()
    return g
