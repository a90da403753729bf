"""Experiment orchestration, metrics, latency benchmarking and report export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import anchors as A
from . import config as C
from . import explain as E
from . import graph as G
from . import models as M
from . import prune as P
from . import synthgen as S

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HIGH = C.RISKS.index("high")


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    accuracy: float
    precision: list  # per class, percent; None when the class is never predicted
    recall: list  # per class, percent; None when the class has no support
    fp_high: float | None
    fn_high: float | None
    confusion: list  # rows = true class, columns = predicted class
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(predictions, labels, n_classes: int = 3) -> MetricsReport:
    """Accuracy, per-class precision/recall and the high-risk FP/FN rates (percent)."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"{len(pred)} predictions for {len(true)} labels")
    if len(true) == 0:
        raise ValueError("no predictions to score")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    diag = np.diag(cm)
    prec = [100.0 * diag[c] / col[c] if col[c] else None for c in range(n_classes)]
    rec = [100.0 * diag[c] / row[c] if row[c] else None for c in range(n_classes)]
    fp = None if prec[HIGH] is None else 100.0 - prec[HIGH]
    fn = None if rec[HIGH] is None else 100.0 - rec[HIGH]
    return MetricsReport(100.0 * diag.sum() / cm.sum(), prec, rec, fp, fn, cm.tolist(), int(cm.sum()))


def latency_stats(ms: Sequence[float]) -> dict:
    a = np.asarray(ms, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std()), "median": float(np.median(a)), "n": len(a)}


def latency_bench(strategy: str, samples: Sequence[S.ReportRecord], params, cfg, anchor_set: A.AnchorSet,
                  quantizers, warmup: int = 10, seed: int = 0) -> dict:
    """Per-sample wall time of graph assembly plus forward pass, warm-up excluded."""
    if not samples:
        raise ValueError("latency_bench needs at least one sample")
    rng = np.random.default_rng(seed)

    def once(rec):
        t0 = time.perf_counter()
        g = A.assemble_inference_graph(rec, anchor_set, quantizers, rng)
        M.variant_forward(cfg.variant, params, g, train=False, n_heads=cfg.heads)
        return (time.perf_counter() - t0) * 1000.0

    for i in range(warmup):
        once(samples[i % len(samples)])
    times = [once(r) for r in samples]
    return {"strategy": strategy, **latency_stats(times)}


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    n: int = 5000
    year: int = 2024
    risk_dist: list = field(default_factory=lambda: [0.25, 0.35, 0.40])
    data_seed: int = 7
    variant: str = "inductive"
    profile: str = "desk"
    train_overrides: dict = field(default_factory=dict)
    seed: int = 0
    anchor_strategies: list = field(default_factory=lambda: list(A.STRATEGIES))
    prune_strategies: list = field(default_factory=lambda: ["bottom_excluded", "top_only"])
    samples_per_cell: int = 10
    latency_samples: int = 50
    out_dir: str = "run"
    version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported config version {d.get('version')}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def train_config(self, variant: str | None = None) -> M.TrainConfig:
        return M.TrainConfig.from_profile(self.profile, variant=variant or self.variant, seed=self.seed,
                                          **self.train_overrides)

    def validate(self) -> None:
        if self.variant not in M.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for s in self.anchor_strategies:
            if s not in A.STRATEGIES:
                raise ValueError(f"unknown anchor strategy {s!r}")
        for s in self.prune_strategies:
            if s not in P.STRATEGIES:
                raise ValueError(f"unknown prune strategy {s!r}")
        if self.samples_per_cell < 1:
            raise ValueError("samples_per_cell must be >= 1")
        self.train_config().validate()


# ---------------------------------------------------------------- stages

# files whose content depends on wall-clock time; listed but never hashed
TIMING_FILES = ("latency.json", "timings.json")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _history_hash(path: Path) -> str:
    rows = list(csv.reader(path.read_text().splitlines()))
    return C.stable_hash([r[:-1] for r in rows])


def _config_hash(path: Path) -> str:
    return C.stable_hash({k: v for k, v in json.loads(path.read_text()).items() if k != "out_dir"})


def _comparison_hash(path: Path) -> str:
    rows = list(csv.DictReader(path.read_text().splitlines()))
    return C.stable_hash([{k: v for k, v in r.items() if k != "train_seconds"} for r in rows])


class StageError(RuntimeError):
    pass


class Experiment:
    """One experiment directory; every stage reads its inputs from disk."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.timings: dict[str, float] = {}

    # helpers -------------------------------------------------------------
    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def records(self):
        return S.read_dataset(self.path("dataset.ndjson"))

    def split(self, records):
        return S.split_dataset(records, seed=self.cfg.data_seed)

    def quantizers(self):
        return G.quantizers_from_dict(json.loads(self.path("quantizers.json").read_text()))

    # stages --------------------------------------------------------------
    def stage_generate(self):
        c = self.cfg
        recs = S.generate_dataset(c.n, c.year, c.risk_dist, c.data_seed)
        meta = {"n": c.n, "year": c.year, "risk_dist": c.risk_dist, "seed": c.data_seed}
        S.write_dataset(recs, self.path("dataset.ndjson"), meta)
        _write_json(self.path("audit.json"), S.validate_dataset(recs).to_dict())

    def stage_graph(self):
        recs = self.records()
        sp = self.split(recs)
        q = G.fit_quantizers(sp.train)
        _write_json(self.path("quantizers.json"), G.quantizers_to_dict(q))
        split, labeled = sp.arrays(len(recs))
        G.save_graph(G.build_graph(recs, q, split=split, labeled=labeled), self.path("graph"))

    def stage_train(self):
        g = G.load_graph(self.path("graph"))
        cfg = self.cfg.train_config()
        params, hist = M.train(g, cfg)
        M.save_model(self.path("ckpt"), params, cfg, hist, {"graph_hash": G.content_hash(g)})
        test = np.nonzero(g.split == 2)[0]
        logits = M.predict_logits(cfg.variant, params, g, test, cfg.eval_batch_size, cfg.heads)
        _write_json(self.path("metrics.json"), compute_metrics(np.argmax(logits, axis=1), g.y[test]).to_dict())

    def stage_explain(self):
        g = G.load_graph(self.path("graph"))
        params, cfg, _ = M.load_model(self.path("ckpt"))
        pool = np.nonzero(g.split == 0)[0]
        sample = E.sample_strata(g, pool, self.cfg.samples_per_cell, self.cfg.seed)
        vectors = E.explain_reports(cfg.variant, params, g, sample, n_heads=cfg.heads)
        E.aggregate_importance(vectors).save(self.path("importance.json"))

    def stage_anchors(self):
        recs = self.records()
        sp = self.split(recs)
        q = self.quantizers()
        self.path("anchors").mkdir(exist_ok=True)
        for s in self.cfg.anchor_strategies:
            A.build_anchor_set(s, sp.train, q).save(self.path("anchors", f"{s}.json"))

    def _test_samples(self, recs, per_cell):
        sp = self.split(recs)
        split, _ = sp.arrays(len(recs))
        g_idx = np.nonzero(split == 2)[0]
        cats = np.array([C.CATEGORY_NAMES.index(r.category) for r in recs])
        ys = np.array([C.RISKS.index(r.risk) for r in recs])
        rng = np.random.default_rng(self.cfg.seed)
        picked = []
        for c in range(len(C.CATEGORY_NAMES)):
            for y in range(len(C.RISKS)):
                cell = g_idx[(cats[g_idx] == c) & (ys[g_idx] == y)]
                if len(cell) > per_cell:
                    cell = np.sort(rng.choice(cell, per_cell, replace=False))
                picked.extend(cell.tolist())
        return [recs[i] for i in sorted(picked)]

    def stage_agreement(self):
        recs = self.records()
        q = self.quantizers()
        params, cfg, _ = M.load_model(self.path("ckpt"))
        samples = self._test_samples(recs, self.cfg.samples_per_cell)
        by_strategy = {}
        for s in self.cfg.anchor_strategies:
            aset = A.AnchorSet.load(self.path("anchors", f"{s}.json"))
            rng = np.random.default_rng(self.cfg.seed)
            vecs = []
            for rec in samples:
                g = A.assemble_inference_graph(rec, aset, q, rng)
                g.y[0] = C.RISKS.index(rec.risk)  # tag for stratified reporting only
                vecs.extend(E.explain(cfg.variant, params, g, s, cfg.heads))
            by_strategy[s] = vecs
        report = E.top1_agreement(by_strategy) if len(by_strategy) > 1 else {}
        report["self_agreement"] = {s: E.top1_agreement({s: v, s + "_copy": v})["overall"]
                                    for s, v in by_strategy.items()}
        _write_json(self.path("agreement.json"), report)

    def stage_latency(self):
        recs = self.records()
        q = self.quantizers()
        params, cfg, _ = M.load_model(self.path("ckpt"))
        samples = self._test_samples(recs, max(1, self.cfg.latency_samples // 33 + 1))[: self.cfg.latency_samples]
        rows = []
        for s in self.cfg.anchor_strategies:
            aset = A.AnchorSet.load(self.path("anchors", f"{s}.json"))
            rows.append(latency_bench(s, samples, params, cfg, aset, q, seed=self.cfg.seed))
        _write_json(self.path("latency.json"), {"rows": rows})

    def stage_prune(self):
        recs = self.records()
        sp = self.split(recs)
        q = self.quantizers()
        split, labeled = sp.arrays(len(recs))
        table = E.ImportanceTable.load(self.path("importance.json"))
        original = G.load_graph(self.path("graph"))
        params, cfg, manifest = M.load_model(self.path("ckpt"))
        test = np.nonzero(split == 2)[0]
        metrics = json.loads(self.path("metrics.json").read_text())
        rows = [{"model": cfg.variant, "graph": "original", "edges": G.graph_stats(original)["total_edges"],
                 "acc": metrics["accuracy"], "fp": metrics["fp_high"], "fn": metrics["fn_high"],
                 "train_seconds": self.timings.get("train", float("nan"))}]
        reductions = {}
        for strategy in self.cfg.prune_strategies:
            spec = {"bottom_excluded": P.derive_bottom_excluded, "top_only": P.derive_top_only}.get(
                strategy, lambda t: P.identity_spec())(table)
            spec.save(self.path(f"prune_spec_{strategy}.json"))
            pruned, red, _ = P.apply_prune(recs, q, spec, split=split, labeled=labeled)
            reductions[strategy] = red
            t0 = time.perf_counter()
            p2, _ = M.train(pruned, cfg)
            seconds = time.perf_counter() - t0
            logits = M.predict_logits(cfg.variant, p2, pruned, test, cfg.eval_batch_size, cfg.heads)
            m = compute_metrics(np.argmax(logits, axis=1), pruned.y[test])
            rows.append({"model": cfg.variant, "graph": strategy, "edges": G.graph_stats(pruned)["total_edges"],
                         "acc": m.accuracy, "fp": m.fp_high, "fn": m.fn_high, "train_seconds": round(seconds, 3)})
        self.path("prune_comparison.csv").write_text(P.comparison_csv(rows))
        _write_json(self.path("prune_reduction.json"), reductions)

    STAGES = ("generate", "graph", "train", "explain", "anchors", "agreement", "latency", "prune")
    OUTPUTS = {
        "generate": ("dataset.ndjson", "audit.json"),
        "graph": ("quantizers.json", "graph/manifest.json"),
        "train": ("ckpt/checkpoint.json", "metrics.json"),
        "explain": ("importance.json",),
        "anchors": ("anchors",),
        "agreement": ("agreement.json",),
        "latency": ("latency.json",),
        "prune": ("prune_comparison.csv", "prune_reduction.json"),
    }

    def run(self, resume: bool = False) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        _write_json(self.path("config.json"), asdict(self.cfg))
        timings_path = self.path("timings.json")
        if resume and timings_path.exists():
            self.timings = json.loads(timings_path.read_text())
        for stage in self.STAGES:
            if resume and all(self.path(o).exists() for o in self.OUTPUTS[stage]):
                continue
            t0 = time.perf_counter()
            try:
                getattr(self, f"stage_{stage}")()
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                _write_json(timings_path, self.timings)
                raise StageError(f"stage {stage!r} failed: {exc}") from exc
            self.timings[stage] = round(time.perf_counter() - t0, 3)
            log.info("stage %s done in %.1fs", stage, self.timings[stage])
        _write_json(timings_path, self.timings)
        return self.write_manifest()

    def write_manifest(self) -> dict:
        files = {}
        for p in sorted(self.out.rglob("*")):
            rel = p.relative_to(self.out).as_posix()
            if not p.is_file() or rel == "manifest.json" or rel.startswith("exports/"):
                continue
            if p.name in TIMING_FILES:
                files[rel] = "timing"
            elif p.name == "history.csv":
                files[rel] = _history_hash(p)
            elif p.name == "prune_comparison.csv":
                files[rel] = _comparison_hash(p)
            elif rel == "config.json":
                files[rel] = _config_hash(p)
            else:
                files[rel] = _sha(p)
        manifest = {
            # where a run is written does not change what it computes
            "config_hash": C.stable_hash({k: v for k, v in asdict(self.cfg).items() if k != "out_dir"}),
            "generator_config_hash": C.config_hash(),
            "seeds": {"data": self.cfg.data_seed, "train": self.cfg.seed},
            "files": files,
        }
        _write_json(self.path("manifest.json"), manifest)
        return manifest


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> dict:
    return Experiment(cfg).run(resume)


def manifest_without_timing(manifest: dict) -> dict:
    return {k: v for k, v in manifest.items() if k != "timings"}


# ---------------------------------------------------------------- export

REQUIRED = ("manifest.json", "latency.json", "agreement.json", "importance.json", "prune_comparison.csv")


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def export_report(out_dir: str | Path) -> list[Path]:
    """Write one CSV per table analog plus (x, y, series) plot-data files."""
    out = Path(out_dir)
    missing = [f for f in REQUIRED if not (out / f).exists()]
    if missing:
        raise FileNotFoundError(f"experiment directory {out} is incomplete; missing {missing}")
    exp = out / "exports"
    exp.mkdir(exist_ok=True)
    written = []

    latency = json.loads((out / "latency.json").read_text())["rows"]
    rows = [["strategy", "mean_ms", "std_ms", "median_ms"]]
    rows += [[r["strategy"], f"{r['mean']:.3f}", f"{r['std']:.3f}", f"{r['median']:.3f}"] for r in latency]
    written.append(exp / "latency.csv")
    written[-1].write_text(_csv(rows))

    agree = json.loads((out / "agreement.json").read_text())
    rows = [["section", "key", "rate", "n"]]
    if "overall" in agree:
        rows.append(["overall", "all", agree["overall"], agree["n"]])
        for section in ("by_risk", "by_category"):
            for k, v in agree[section].items():
                rows.append([section, k, v["rate"], v["n"]])
    written.append(exp / "agreement.csv")
    written[-1].write_text(_csv(rows))

    written.append(exp / "importance.csv")
    written[-1].write_text(E.ImportanceTable.load(out / "importance.json").to_csv())

    written.append(exp / "pruning.csv")
    written[-1].write_text((out / "prune_comparison.csv").read_text())

    plot = [["x", "y", "series"]]
    plot += [[r["strategy"], f"{r['mean']:.3f}", "latency_mean_ms"] for r in latency]
    if "by_risk" in agree:
        plot += [[k, v["rate"], "agreement_by_risk"] for k, v in agree["by_risk"].items()]
    for r in csv.DictReader((out / "prune_comparison.csv").read_text().splitlines()):
        plot.append([f"{r['model']}/{r['graph']}", r["acc"], "accuracy"])
        plot.append([f"{r['model']}/{r['graph']}", r["edges"], "edges"])
    written.append(exp / "plot_data.csv")
    written[-1].write_text(_csv(plot))

    written.append(exp / "manifest.json")
    written[-1].write_text((out / "manifest.json").read_text())
    return written
