"""Per-node-type importance from attention weights or gradients.

Scores are normalised separately within the sensor group and within the
context group, each to 100. Structural types (location, report_count,
report_type) are never scored.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import config as C
from . import graph as G
from . import models as M
from . import ndiff as nd

GROUP = {**{t: "sensor" for t in C.SENSORS}, **{t: "context" for t in C.CONTEXT_TYPES}}


def rank(scores: Mapping[str, float]) -> list[str]:
    """Types by descending score; ties fall back to lexicographic name order."""
    return sorted(scores, key=lambda t: (-scores[t], t))


@dataclass
class ImportanceVector:
    scores: dict[str, float]
    sample_id: int = -1
    category: str = ""
    risk: str = ""
    variant: str = ""
    strategy: str = ""
    uniform_groups: tuple[str, ...] = ()

    @property
    def groups(self) -> dict[str, str]:
        return {t: GROUP[t] for t in self.scores}

    def top1(self) -> str:
        return rank(self.scores)[0]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id, "category": self.category, "risk": self.risk,
            "variant": self.variant, "strategy": self.strategy,
            "scores": {t: round(v, 6) for t, v in self.scores.items()},
            "groups": self.groups, "uniform_groups": list(self.uniform_groups),
        }


def normalize_groups(raw: Mapping[str, float], eligible: Sequence[str] = C.ELIGIBLE_TYPES, **meta) -> ImportanceVector:
    """Scale each group of ``raw`` to sum to 100; an all-zero group is split evenly."""
    scores, uniform = {}, []
    for group in ("sensor", "context"):
        members = [t for t in eligible if t in raw and GROUP.get(t) == group]
        if not members:
            continue
        vals = np.array([max(float(raw[t]), 0.0) for t in members])
        total = vals.sum()
        if total > 0 and np.isfinite(total):
            vals = 100.0 * vals / total
        else:
            vals = np.full(len(members), 100.0 / len(members))
            uniform.append(group)
        scores.update(zip(members, vals.tolist()))
    if not scores:
        raise ValueError("no eligible neighbour types to score")
    return ImportanceVector(scores, uniform_groups=tuple(uniform), **meta)


def _meta(graph: G.HeteroGraph, r: int, variant: str, strategy: str) -> dict:
    y = int(graph.y[r])
    return {
        "sample_id": int(graph.record_ids[r]),
        "category": C.CATEGORY_NAMES[int(graph.category[r])],
        "risk": C.RISKS[y] if y >= 0 else "",
        "variant": variant,
        "strategy": strategy,
    }


def attention_importance(out: M.ForwardOutput, graph: G.HeteroGraph, variant: str = "",
                         strategy: str = "", eligible: Sequence[str] = C.ELIGIBLE_TYPES) -> list[ImportanceVector]:
    """One vector per scored report, read from a finished forward pass only."""
    if not out.attention:
        raise ValueError("empty attention record (inductive variant); use gradient_importance instead")
    heads = list(out.attention)
    star = graph.star_index()
    vectors = []
    for row, r in enumerate(out.targets):
        raw = {}
        for j, t in enumerate(C.NEIGHBOR_TYPES):
            if t not in eligible or star[t][r] < 0:
                continue
            contrib = [out.attention[k]["alpha"][row, j] for k in heads if t in M.HEAD_TYPES[k]]
            if contrib:
                raw[t] = float(np.mean(contrib))
        vectors.append(normalize_groups(raw, eligible, **_meta(graph, r, variant, strategy)))
    return vectors


def gradient_importance(variant: str, params, graph: G.HeteroGraph, strategy: str = "",
                        eligible: Sequence[str] = C.ELIGIBLE_TYPES, n_heads: int = 4) -> list[ImportanceVector]:
    """|d logit_pred / d h_v| * |h_v|, L1-reduced, per neighbour of each scored report.

    h_v is the neighbour embedding the readout consumes: the first-layer
    output for the inductive variant (its second layer only reaches the
    report through aggregation of first-layer neighbours) and the final
    layer for the attention variants.
    """
    layer = 1 if variant == "inductive" else 2
    star = graph.star_index()
    with nd.Tape() as tape:
        out = M.variant_forward(variant, params, graph, train=False, n_heads=n_heads)
        pred = np.argmax(out.logits.value, axis=1)
        target = nd.reduce_sum(nd.pick(out.logits, pred))
    hid = out.hidden[layer]
    types = [t for t in eligible if t in hid]
    grads = nd.backward(tape, target, [hid[t] for t in types])
    grad_of = dict(zip(types, grads))
    vectors = []
    for r in out.targets:
        raw = {}
        for t in types:
            i = star[t][r]
            if i < 0:
                continue
            raw[t] = float(np.abs(grad_of[t][i] * hid[t].value[i]).sum())
        if not raw:
            raise ValueError(f"report {int(graph.record_ids[r])} has no eligible neighbours")
        vectors.append(normalize_groups(raw, eligible, **_meta(graph, r, variant, strategy)))
    return vectors


def explain(variant: str, params, graph: G.HeteroGraph, strategy: str = "", n_heads: int = 4):
    """Attention importance for attention variants, gradient importance otherwise."""
    if variant == "inductive":
        return gradient_importance(variant, params, graph, strategy, n_heads=n_heads)
    out = M.variant_forward(variant, params, graph, train=False, n_heads=n_heads)
    return attention_importance(out, graph, variant, strategy)


def explain_reports(variant: str, params, graph: G.HeteroGraph, idx, batch_size: int = 256,
                    strategy: str = "", n_heads: int = 4) -> list[ImportanceVector]:
    """Importance for reports ``idx`` of a large graph via closed report subgraphs."""
    out = []
    idx = np.asarray(idx, dtype=np.int64)
    for s in range(0, len(idx), batch_size):
        sub = G.report_subgraph(graph, idx[s:s + batch_size])
        out.extend(explain(variant, params, sub, strategy, n_heads))
    return out


def sample_strata(graph: G.HeteroGraph, pool, per_cell: int, seed: int) -> np.ndarray:
    """Up to ``per_cell`` reports per (category, risk), drawn reproducibly from ``pool``."""
    rng = np.random.default_rng(seed)
    pool = np.asarray(pool, dtype=np.int64)
    picked = []
    for c in range(len(C.CATEGORY_NAMES)):
        for y in range(len(C.RISKS)):
            cell = pool[(graph.category[pool] == c) & (graph.y[pool] == y)]
            if len(cell) > per_cell:
                cell = np.sort(rng.choice(cell, per_cell, replace=False))
            picked.extend(cell.tolist())
    return np.array(sorted(picked), dtype=np.int64)


# ---------------------------------------------------------------- tables


@dataclass
class ImportanceTable:
    cells: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def top(self, category: str, risk: str, k: int = 3) -> list[str]:
        if (category, risk) not in self.cells:
            raise KeyError(f"no importance cell for ({category}, {risk})")
        return rank(self.cells[(category, risk)])[:k]

    def to_dict(self) -> dict:
        return {
            "cells": [
                {"category": c, "risk": r, "n": self.counts.get((c, r), 0),
                 "importance": {t: round(v, 6) for t, v in sorted(self.cells[(c, r)].items())},
                 "top3": self.top(c, r)}
                for (c, r) in sorted(self.cells)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceTable":
        t = cls()
        for cell in d["cells"]:
            key = (cell["category"], cell["risk"])
            t.cells[key] = {k: float(v) for k, v in cell["importance"].items()}
            t.counts[key] = int(cell.get("n", 0))
        return t

    @property
    def hash(self) -> str:
        return C.stable_hash(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "risk", "type", "mean_importance", "n"])
        for (c, r) in sorted(self.cells):
            for t in rank(self.cells[(c, r)]):
                w.writerow([c, r, t, f"{self.cells[(c, r)][t]:.4f}", self.counts.get((c, r), 0)])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        p = Path(path)
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        p.with_suffix(".csv").write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "ImportanceTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate_importance(vectors: Sequence[ImportanceVector]) -> ImportanceTable:
    """Mean vector per (category, risk); a type missing from a vector counts as 0."""
    groups = defaultdict(list)
    for v in vectors:
        if not v.category or not v.risk:
            raise ValueError(f"vector for sample {v.sample_id} lacks its (category, risk) tag")
        groups[(v.category, v.risk)].append(v)
    table = ImportanceTable()
    for key in sorted(groups):
        vs = groups[key]
        types = sorted({t for v in vs for t in v.scores})
        table.cells[key] = {t: float(np.mean([v.scores.get(t, 0.0) for v in vs])) for t in types}
        table.counts[key] = len(vs)
    return table


# ---------------------------------------------------------------- agreement


def top1_agreement(by_strategy: Mapping[str, Sequence[ImportanceVector]]) -> dict:
    """Share of samples whose top-1 type is identical under every strategy."""
    if len(by_strategy) < 2:
        raise ValueError("agreement needs at least two strategies")
    names = sorted(by_strategy)
    ref_ids = [v.sample_id for v in by_strategy[names[0]]]
    for n in names[1:]:
        if [v.sample_id for v in by_strategy[n]] != ref_ids:
            raise ValueError(f"sample ids of strategy {n!r} do not match those of {names[0]!r}")
    if not ref_ids:
        raise ValueError("no samples to compare")

    agree = []
    for i in range(len(ref_ids)):
        tops = {by_strategy[n][i].top1() for n in names}
        agree.append(len(tops) == 1)
    agree = np.array(agree)
    ref = by_strategy[names[0]]

    def breakdown(key):
        out = {}
        for val in sorted({getattr(v, key) for v in ref}):
            m = np.array([getattr(v, key) == val for v in ref])
            out[val] = {"rate": round(100.0 * agree[m].mean(), 4), "n": int(m.sum())}
        return out

    return {
        "strategies": names,
        "n": len(ref_ids),
        "overall": round(100.0 * agree.mean(), 4),
        "by_risk": breakdown("risk"),
        "by_category": breakdown("category"),
        "benchmark_overall": 97.5,
    }
