"""Command-line entry point: ``riskgraph <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import anchors as A
from . import explain as E
from . import graph as G
from . import harness as H
from . import models as M
from . import prune as P
from . import synthgen as S


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _risk_dist(text: str) -> list[float]:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("risk distribution needs three comma-separated values")
    return vals


def cmd_gen(a):
    recs = S.generate_dataset(a.n, a.year, a.risk_dist, a.seed)
    meta = S.write_dataset(recs, a.out, {"n": a.n, "year": a.year, "risk_dist": a.risk_dist, "seed": a.seed})
    _dump({"out": str(a.out), "sha256": meta["sha256"], "audit_overall": meta["audit"]["overall_pct"]})


def cmd_validate(a):
    report = S.validate_dataset(S.read_dataset(a.inp))
    _dump(report.to_dict())


def _split_for(records, seed):
    sp = S.split_dataset(records, seed=seed)
    split, labeled = sp.arrays(len(records))
    return sp, split, labeled


def cmd_build_graph(a):
    recs = S.read_dataset(a.inp)
    sp, split, labeled = _split_for(recs, a.split_seed)
    q = G.fit_quantizers(sp.train)
    spec = P.PruneSpec.load(a.prune_spec) if a.prune_spec else None
    g = G.build_graph(recs, q, spec, split=split, labeled=labeled)
    G.save_graph(g, a.out)
    Path(a.out, "quantizers.json").write_text(json.dumps(G.quantizers_to_dict(q), indent=2, sort_keys=True) + "\n")
    _dump(G.graph_stats(g))


def cmd_train(a):
    g = G.load_graph(a.graph)
    over = {"epochs": a.epochs} if a.epochs else {}
    cfg = M.TrainConfig.from_profile(a.profile, variant=a.variant, seed=a.seed, **over)
    params, hist = M.train(g, cfg, log=logging.getLogger("riskgraph.train").info)
    M.save_model(a.out_ckpt, params, cfg, hist, {"graph_hash": G.content_hash(g)})
    qpath = Path(a.graph, "quantizers.json")
    if qpath.exists():
        Path(a.out_ckpt, "quantizers.json").write_text(qpath.read_text())
    _dump({"best_epoch": hist.best_epoch, "best_val_acc": hist.best_val_acc, "stopped_epoch": hist.stopped_epoch})


def cmd_prune_derive(a):
    table = E.ImportanceTable.load(a.table)
    derive = {"bottom_excluded": P.derive_bottom_excluded, "top_only": P.derive_top_only}[a.strategy]
    spec = derive(table, prunable=a.prunable)
    spec.save(a.out)
    _dump({"out": str(a.out), "hash": spec.hash})


def cmd_prune_cycle(a):
    recs = S.read_dataset(a.dataset)
    sp = S.split_dataset(recs, seed=a.split_seed)
    cfg = M.TrainConfig.from_profile(a.profile, variant=a.variant, seed=a.seed)
    res = P.prune_retrain_cycle(recs, sp, a.variant, a.strategy, cfg, per_cell=a.per_cell, seed=a.seed)
    sys.stdout.write(P.comparison_csv(res["rows"]))


def _quantizers(ckpt_dir):
    path = Path(ckpt_dir, "quantizers.json")
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; train from a graph built by build-graph")
    return G.quantizers_from_dict(json.loads(path.read_text()))


def cmd_anchors_build(a):
    recs = S.read_dataset(a.train)
    sp = S.split_dataset(recs, seed=a.split_seed)
    aset = A.build_anchor_set(a.strategy, sp.train, _quantizers(a.ckpt_dir))
    out = Path(a.ckpt_dir, f"anchors_{a.strategy}.json")
    aset.save(out)
    _dump({"out": str(out), "shortfall": aset.shortfall})


def cmd_infer(a):
    report = S.ReportRecord.from_dict(json.loads(Path(a.report).read_text()))
    params, cfg, _ = M.load_model(a.ckpt_dir)
    aset = A.AnchorSet.load(Path(a.ckpt_dir, f"anchors_{a.strategy}.json"))
    _dump(A.infer_report(report, aset, _quantizers(a.ckpt_dir), params, cfg, np.random.default_rng(a.seed)))


def cmd_run(a):
    cfg = H.ExperimentConfig.load(a.config)
    if a.out:
        cfg.out_dir = a.out
    manifest = H.run_experiment(cfg, resume=a.resume)
    _dump({"out_dir": cfg.out_dir, "files": len(manifest["files"])})


def cmd_export(a):
    for p in H.export_report(a.dir):
        print(p)


def cmd_bench(a):
    params, cfg, _ = M.load_model(a.ckpt_dir)
    aset = A.AnchorSet.load(Path(a.ckpt_dir, f"anchors_{a.strategy}.json"))
    recs = S.read_dataset(a.dataset)
    sp = S.split_dataset(recs, seed=a.split_seed)
    samples = sp.test[: a.n]
    _dump(H.latency_bench(a.strategy, samples, params, cfg, aset, _quantizers(a.ckpt_dir), warmup=a.warmup))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskgraph", description="Risk classification over heterogeneous report graphs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--year", type=int, default=2024)
    s.add_argument("--risk-dist", type=_risk_dist, default=[0.25, 0.35, 0.40])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("validate", help="audit a dataset against the alert rules")
    s.add_argument("--in", dest="inp", type=Path, required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("build-graph", help="encode a dataset as a heterogeneous graph")
    s.add_argument("--in", dest="inp", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--prune-spec", type=Path)
    s.add_argument("--split-seed", type=int, default=7)
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("train", help="train a model variant on a saved graph")
    s.add_argument("--variant", choices=M.VARIANTS, default="inductive")
    s.add_argument("--graph", type=Path, required=True)
    s.add_argument("--profile", choices=sorted(M.PROFILES), default="desk")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, help="override the profile's epoch budget")
    s.add_argument("--out-ckpt", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    pr = sub.add_parser("prune", help="derive prune specs or run a prune/retrain cycle")
    psub = pr.add_subparsers(dest="prune_command", required=True)
    s = psub.add_parser("derive")
    s.add_argument("--table", type=Path, required=True)
    s.add_argument("--strategy", choices=("bottom_excluded", "top_only"), required=True)
    s.add_argument("--prunable", choices=("sensor", "all"), default="sensor")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_prune_derive)
    s = psub.add_parser("cycle")
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--variant", choices=M.VARIANTS, default="inductive")
    s.add_argument("--strategy", choices=P.STRATEGIES, required=True)
    s.add_argument("--profile", choices=sorted(M.PROFILES), default="desk")
    s.add_argument("--per-cell", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split-seed", type=int, default=7)
    s.set_defaults(func=cmd_prune_cycle)

    an = sub.add_parser("anchors", help="build anchor sets")
    asub = an.add_subparsers(dest="anchors_command", required=True)
    s = asub.add_parser("build")
    s.add_argument("--strategy", choices=A.STRATEGIES, required=True)
    s.add_argument("--train", type=Path, required=True, help="dataset file; its train split is used")
    s.add_argument("--ckpt-dir", type=Path, required=True)
    s.add_argument("--split-seed", type=int, default=7)
    s.set_defaults(func=cmd_anchors_build)

    s = sub.add_parser("infer", help="classify one report")
    s.add_argument("--report", type=Path, required=True)
    s.add_argument("--strategy", choices=A.STRATEGIES, required=True)
    s.add_argument("--ckpt-dir", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("run", help="run a full experiment from a JSON config")
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--out", help="override the configured output directory")
    s.add_argument("--resume", action="store_true", help="skip stages whose outputs already exist")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("export", help="export table CSVs and plot data from a finished run")
    s.add_argument("--dir", type=Path, required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("bench", help="per-sample inference latency")
    s.add_argument("--strategy", choices=A.STRATEGIES, required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--ckpt-dir", type=Path, required=True)
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--split-seed", type=int, default=7)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, H.StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
