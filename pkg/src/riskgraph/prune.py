"""Category-conditioned graph pruning driven by an importance table."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from . import graph as G
from .explain import ImportanceTable

STRATEGIES = ("bottom_excluded", "top_only", "identity")
LEAKAGE_NOTE = "top_only selects edges by ground-truth risk on every split, including test"


@dataclass
class PruneSpec:
    """Which neighbour types each record keeps.

    ``ranked`` holds the importance-derived type sets exactly (per category
    for bottom_excluded, per (category, risk) for top_only). A type outside
    ``prunable`` is never removed, so the retained set is ranked plus every
    protected type.
    """

    strategy: str
    ranked: dict = field(default_factory=dict)  # key -> tuple of types
    prunable: tuple[str, ...] = C.SENSORS
    source_hash: str | None = None

    def _key(self, category: str, risk: str):
        return (category, risk) if self.strategy == "top_only" else category

    def covers(self, category: str) -> bool:
        if self.strategy == "identity":
            return True
        if self.strategy == "top_only":
            return all((category, r) in self.ranked for r in C.RISKS)
        return category in self.ranked

    def removed(self, category: str, risk: str) -> frozenset[str]:
        if self.strategy == "identity":
            return frozenset()
        key = self._key(category, risk)
        if key not in self.ranked:
            raise KeyError(f"prune spec has no entry for {key}")
        return frozenset(t for t in self.prunable if t not in self.ranked[key])

    def retained(self, category: str, risk: str) -> frozenset[str]:
        return frozenset(C.NEIGHBOR_TYPES) - self.removed(category, risk)

    def to_dict(self) -> dict:
        if self.strategy == "top_only":
            entries = [{"category": c, "risk": r, "top3": list(v)} for (c, r), v in sorted(self.ranked.items())]
        else:
            entries = [{"category": c, "kept_ranked": list(v)} for c, v in sorted(self.ranked.items())]
        retained = {}
        for key in sorted(self.ranked):
            cat, risk = key if isinstance(key, tuple) else (key, C.RISKS[0])
            label = f"{cat}/{risk}" if isinstance(key, tuple) else cat
            retained[label] = sorted(self.retained(cat, risk))
        return {
            "strategy": self.strategy,
            "prunable": list(self.prunable),
            "entries": entries,
            "retained": retained,
            "structural_always_retained": list(C.STRUCTURAL_TYPES),
            "source_table_hash": self.source_hash,
            "notes": [LEAKAGE_NOTE] if self.strategy == "top_only" else [],
        }

    @property
    def hash(self) -> str:
        return C.stable_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PruneSpec":
        ranked = {}
        for e in d["entries"]:
            if d["strategy"] == "top_only":
                ranked[(e["category"], e["risk"])] = tuple(e["top3"])
            else:
                ranked[e["category"]] = tuple(e["kept_ranked"])
        return cls(d["strategy"], ranked, tuple(d["prunable"]), d.get("source_table_hash"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PruneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _prunable_types(mode: str) -> tuple[str, ...]:
    if mode == "sensor":
        return C.SENSORS
    if mode == "all":
        return C.ELIGIBLE_TYPES
    raise ValueError(f"prunable must be 'sensor' or 'all', got {mode!r}")


def _require_cells(table: ImportanceTable, categories) -> None:
    for c in categories:
        for r in C.RISKS:
            if (c, r) not in table.cells:
                raise ValueError(f"importance table lacks cell ({c}, {r})")


def _categories(table: ImportanceTable) -> list[str]:
    return sorted({c for c, _ in table.cells})


def derive_bottom_excluded(table: ImportanceTable, prunable: str = "sensor") -> PruneSpec:
    """Keep, per category, every type in the top 3 of at least one risk cell."""
    cats = _categories(table)
    _require_cells(table, cats)
    ranked = {}
    for c in cats:
        keep = set()
        for r in C.RISKS:
            keep.update(table.top(c, r, 3))
        ranked[c] = tuple(sorted(keep))
    return PruneSpec("bottom_excluded", ranked, _prunable_types(prunable), table.hash)


def derive_top_only(table: ImportanceTable, prunable: str = "sensor") -> PruneSpec:
    """Keep, per (category, risk), exactly that cell's top 3 ranked types."""
    cats = _categories(table)
    _require_cells(table, cats)
    ranked = {(c, r): tuple(table.top(c, r, 3)) for c in cats for r in C.RISKS}
    return PruneSpec("top_only", ranked, _prunable_types(prunable), table.hash)


def identity_spec() -> PruneSpec:
    return PruneSpec("identity", {}, (), None)


def apply_prune(records, quantizers, spec: PruneSpec, **build_kwargs):
    """Build the pruned graph and report its edge reduction against the original."""
    missing = sorted({r.category for r in records if not spec.covers(r.category)})
    if missing:
        raise ValueError(f"prune spec does not cover categories {missing}")
    original = G.build_graph(records, quantizers, **build_kwargs)
    pruned = G.build_graph(records, quantizers, spec, **build_kwargs)
    report = G.edge_reduction(G.graph_stats(original), G.graph_stats(pruned))
    report["strategy"] = spec.strategy
    report["spec_hash"] = spec.hash
    if spec.strategy == "top_only":
        report["note"] = LEAKAGE_NOTE
    return pruned, report, original


def is_subgraph(pruned: G.HeteroGraph, original: G.HeteroGraph) -> bool:
    """Every pruned edge, mapped to original node ids, exists in the original."""
    po, oo = pruned.star_index(), original.star_index()
    if pruned.n_reports != original.n_reports:
        return False
    for t in C.NEIGHBOR_TYPES:
        p, o = po[t], oo[t]
        has = p >= 0
        if np.any(has & (o < 0)):
            return False
        if t == "location":
            if not np.array_equal(p[has], o[has]):
                return False
        elif has.any() and not np.allclose(pruned.x[t][p[has]], original.x[t][o[has]]):
            return False
    return True


# ---------------------------------------------------------------- retrain cycle

COMPARISON_COLUMNS = ("model", "graph", "edges", "acc", "fp", "fn", "train_seconds")


def prune_retrain_cycle(records, split, variant: str, strategy: str, cfg, per_cell: int = 100,
                        seed: int = 0, log=None) -> dict:
    """Train on the original graph, explain, derive a spec, rebuild, retrain, compare."""
    from . import explain as E
    from . import harness as H
    from . import models as M

    if strategy not in ("bottom_excluded", "top_only", "identity"):
        raise ValueError(f"unknown strategy {strategy!r}")
    quant = G.fit_quantizers(split.train)
    split_arr, labeled = split.arrays(len(records))
    original = G.build_graph(records, quant, split=split_arr, labeled=labeled)
    test_idx = np.nonzero(split_arr == 2)[0]

    def fit_and_score(g, name):
        t0 = time.perf_counter()
        params, hist = M.train(g, cfg, log=log)
        seconds = time.perf_counter() - t0
        logits = M.predict_logits(cfg.variant, params, g, test_idx, cfg.eval_batch_size, cfg.heads)
        m = H.compute_metrics(np.argmax(logits, axis=1), g.y[test_idx])
        row = {"model": variant, "graph": name, "edges": G.graph_stats(g)["total_edges"],
               "acc": m.accuracy, "fp": m.fp_high, "fn": m.fn_high, "train_seconds": round(seconds, 3)}
        return params, row

    params, row_orig = fit_and_score(original, "original")
    if strategy == "identity":
        spec, table = identity_spec(), None
    else:
        sample = E.sample_strata(original, np.nonzero(split_arr == 0)[0], per_cell, seed)
        vectors = E.explain_reports(variant, params, original, sample, n_heads=cfg.heads)
        table = E.aggregate_importance(vectors)
        derive = derive_bottom_excluded if strategy == "bottom_excluded" else derive_top_only
        spec = derive(table)
    pruned, reduction, _ = apply_prune(records, quant, spec, split=split_arr, labeled=labeled)
    _, row_pruned = fit_and_score(pruned, strategy)
    return {"rows": [row_orig, row_pruned], "spec": spec, "table": table, "reduction": reduction}


def comparison_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.4f}" if isinstance(r[k], float) and k != "train_seconds" else r[k])
                    for k in COMPARISON_COLUMNS})
    return buf.getvalue()
