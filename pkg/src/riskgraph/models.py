"""Risk classifiers over a two-layer relational mean-aggregation backbone.

Three variants share the backbone:

* ``inductive``: classifier on the final report embedding.
* ``attention``: one cross-attention head over every neighbour type.
* ``multihead``: sensor, context and full heads fused by a learned combiner.

Relation maps use two shared bases per layer with a diagonal gate per
(relation, basis), which keeps parameter counts close to the reference
budgets while still giving every relation its own transform.
"""

from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import config as C
from . import graph as G
from . import ndiff as nd
from .ndiff import Tensor

VARIANTS = ("inductive", "attention", "multihead")
N_BASES = 2
N_CLASSES = 3

HEAD_TYPES = {
    "S": C.SENSORS,
    "C": ("weather_alert", "pre_alert_type", "pre_alert_time", "pre_alert_severity", "location", "drainage"),
    "F": C.NEIGHBOR_TYPES,
}
VARIANT_HEADS = {"inductive": (), "attention": ("F",), "multihead": ("S", "C", "F")}

PROFILES = {
    "main": dict(d=128, lr=1e-3, patience=20, epochs=100, batch_size=256),
    "pruning-bench": dict(d=256, lr=1e-3, patience=20, epochs=50, batch_size=256),
    "desk": dict(d=64, lr=3e-3, patience=20, epochs=10, batch_size=32),
    # longer, gentler desk run whose attention is stable enough to rank sensors
    "desk-explain": dict(d=64, lr=1e-3, patience=20, epochs=30, batch_size=32, modality_drop=0.25),
}


@dataclass
class TrainConfig:
    variant: str = "inductive"
    d: int = 128
    heads: int = 4
    dropout: float = 0.3
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    patience: int = 20
    seed: int = 0
    edge_drop: float = 0.0
    modality_drop: float = 0.0
    embed_std: float = 0.02
    eval_batch_size: int = 512

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return cls(**{**PROFILES[profile], **overrides})

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.d % self.heads:
            raise ValueError(f"hidden width {self.d} is not divisible by {self.heads} heads")


# ---------------------------------------------------------------- parameters


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(cfg: TrainConfig) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    p: dict[str, np.ndarray] = {}
    for t in C.NODE_TYPES:
        fan_in = C.REPORT_TYPE_EMBED_DIM if t == "report_type" else G.FEATURE_DIMS[t]
        p[f"in.{t}.W"] = _glorot(rng, fan_in, d)
        p[f"in.{t}.b"] = np.zeros(d)
    p["emb.report_type"] = rng.normal(0.0, cfg.embed_std, size=(len(C.CATEGORY_NAMES), C.REPORT_TYPE_EMBED_DIM))
    for layer in (1, 2):
        for b in range(N_BASES):
            p[f"L{layer}.nb{b}"] = _glorot(rng, d, d)
            p[f"L{layer}.self{b}"] = _glorot(rng, d, d)
        for rel in G.relations():
            for b in range(N_BASES):
                p[f"L{layer}.gate.{G.rel_name(rel)}.{b}"] = np.ones(d)
        for t in C.NODE_TYPES:
            for b in range(N_BASES):
                p[f"L{layer}.sgate.{t}.{b}"] = np.ones(d)
            p[f"L{layer}.bias.{t}"] = np.zeros(d)
            p[f"L{layer}.ln.{t}.g"] = np.ones(d)
            p[f"L{layer}.ln.{t}.b"] = np.zeros(d)
    heads = VARIANT_HEADS[cfg.variant]
    for k in heads:
        for w in ("Wq", "Wk", "Wv"):
            p[f"head.{k}.{w}"] = _glorot(rng, d, d)
        p[f"head.{k}.ln.g"] = np.ones(d)
        p[f"head.{k}.ln.b"] = np.zeros(d)
    if heads:
        width = len(heads) * d
        p["comb.W1"] = _glorot(rng, width, 2 * d)
        p["comb.b1"] = np.zeros(2 * d)
        p["comb.ln.g"] = np.ones(2 * d)
        p["comb.ln.b"] = np.zeros(2 * d)
        p["comb.W2"] = _glorot(rng, 2 * d, d)
        p["comb.b2"] = np.zeros(d)
    p["cls.W1"] = _glorot(rng, d, d)
    p["cls.b1"] = np.zeros(d)
    p["cls.W2"] = _glorot(rng, d, N_CLASSES)
    p["cls.b2"] = np.zeros(N_CLASSES)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def count_params(params: dict[str, Tensor]) -> int:
    return nd.total_size(params.values())


# ---------------------------------------------------------------- graph helpers


def adjacency(graph: G.HeteroGraph) -> dict:
    """Row-normalised sparse (dst, src) matrices per relation, cached on the graph."""
    cache = graph.__dict__.get("_adj_cache")
    if cache is not None:
        return cache
    out = {}
    for rel, e in graph.edges.items():
        n_dst, n_src = graph.num_nodes(rel[2]), graph.num_nodes(rel[0])
        if e.shape[1] == 0 or n_dst == 0 or n_src == 0:
            continue
        deg = np.bincount(e[1], minlength=n_dst).astype(float)
        vals = 1.0 / deg[e[1]]
        out[rel] = sp.csr_matrix((vals, (e[1], e[0])), shape=(n_dst, n_src))
    graph.__dict__["_adj_cache"] = out
    return out


def isolated_reports(graph: G.HeteroGraph) -> np.ndarray:
    """Reports with no neighbour at all (prediction relies on the self term)."""
    star = graph.star_index()
    has = np.zeros(graph.n_reports, dtype=bool)
    for t in C.NEIGHBOR_TYPES:
        has |= star[t] >= 0
    return np.nonzero(~has)[0]


# ---------------------------------------------------------------- forward


@dataclass
class ForwardOutput:
    logits: Tensor
    targets: np.ndarray  # report indices scored, aligned with logits rows
    attention: dict = field(default_factory=dict)  # head -> {"alpha", "alpha_heads", "allowed", "empty"}
    hidden: list = field(default_factory=list)  # per layer: {type: Tensor}
    flags: dict = field(default_factory=dict)


def input_embeddings(params, graph: G.HeteroGraph) -> dict[str, Tensor]:
    h = {}
    for t in C.NODE_TYPES:
        n = graph.num_nodes(t)
        if n == 0:
            continue
        x = graph.x[t]
        if t == "report_type":
            emb = nd.gather_rows(params["emb.report_type"], x[:, 0].astype(np.int64))
            h[t] = nd.add(nd.matmul(emb, params["in.report_type.W"]), params["in.report_type.b"])
        else:
            h[t] = nd.add(nd.matmul(Tensor(x), params[f"in.{t}.W"]), params[f"in.{t}.b"])
    return h


def relational_conv(params, layer: int, h: dict[str, Tensor], graph: G.HeteroGraph) -> dict[str, Tensor]:
    """One round of per-relation mean aggregation plus the self term."""
    adj = adjacency(graph)
    proj: dict[tuple[str, int], Tensor] = {}

    def projected(t, b):
        if (t, b) not in proj:
            proj[(t, b)] = nd.matmul(h[t], params[f"L{layer}.nb{b}"])
        return proj[(t, b)]

    out = {}
    for t, ht in h.items():
        terms = [nd.mul(nd.matmul(ht, params[f"L{layer}.self{b}"]), params[f"L{layer}.sgate.{t}.{b}"])
                 for b in range(N_BASES)]
        for rel, a in adj.items():
            if rel[2] != t or rel[0] not in h:
                continue
            name = G.rel_name(rel)
            for b in range(N_BASES):
                msg = nd.mean_aggregate(projected(rel[0], b), a)
                terms.append(nd.mul(msg, params[f"L{layer}.gate.{name}.{b}"]))
        out[t] = nd.add(nd.add_n(terms), params[f"L{layer}.bias.{t}"])
    return out


def backbone_forward(params, graph: G.HeteroGraph, train: bool = False, rng=None, dropout: float = 0.3):
    """Return [h0, h1, h2], each a mapping node type -> embedding tensor."""
    h0 = input_embeddings(params, graph)
    c1 = relational_conv(params, 1, h0, graph)
    h1 = {}
    for t, v in c1.items():
        v = nd.relu(nd.layernorm(v, params[f"L1.ln.{t}.g"], params[f"L1.ln.{t}.b"]))
        h1[t] = nd.dropout(v, dropout, train, rng)
    c2 = relational_conv(params, 2, h1, graph)
    h2 = {t: nd.layernorm(nd.add(h1[t], v), params[f"L2.ln.{t}.g"], params[f"L2.ln.{t}.b"]) for t, v in c2.items()}
    return [h0, h1, h2]


def attention_head(params, k: str, q: Tensor, h_r: Tensor, nb: Tensor, allowed: np.ndarray, n_heads: int):
    """Masked multi-head cross-attention of a report query over its neighbours.

    Returns (o, alphas) with alphas shaped (n_heads, B, N); every internal
    head is exactly zero wherever ``allowed`` is False.
    """
    d = q.shape[-1]
    dh = d // n_heads
    Q = nd.matmul(q, params[f"head.{k}.Wq"])
    K = nd.matmul(nb, params[f"head.{k}.Wk"])
    V = nd.matmul(nb, params[f"head.{k}.Wv"])
    blocked = ~allowed
    outs, alphas = [], []
    for i in range(n_heads):
        lo, hi = i * dh, (i + 1) * dh
        s = nd.scale(nd.bmv(nd.slice_last(K, lo, hi), nd.slice_last(Q, lo, hi)), 1.0 / math.sqrt(dh))
        a = nd.softmax(nd.masked_fill(s, blocked, -np.inf))
        outs.append(nd.bvm(a, nd.slice_last(V, lo, hi)))
        alphas.append(a.value)
    o = nd.layernorm(nd.add(h_r, nd.concat(outs)), params[f"head.{k}.ln.g"], params[f"head.{k}.ln.b"])
    return o, np.stack(alphas)


def _mlp_classifier(params, z: Tensor) -> Tensor:
    hidden = nd.relu(nd.add(nd.matmul(z, params["cls.W1"]), params["cls.b1"]))
    return nd.add(nd.matmul(hidden, params["cls.W2"]), params["cls.b2"])


def variant_forward(variant: str, params, graph: G.HeteroGraph, train: bool = False, rng=None,
                    dropout: float = 0.3, n_heads: int = 4) -> ForwardOutput:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    hidden = backbone_forward(params, graph, train, rng, dropout)
    h2 = hidden[-1]
    targets = np.nonzero(graph.target)[0]
    star = graph.star_index()
    h_r = nd.gather_rows(h2["report"], targets)
    flags = {"isolated_reports": isolated_reports(graph).tolist()}
    heads = VARIANT_HEADS[variant]
    if not heads:
        return ForwardOutput(_mlp_classifier(params, h_r), targets, {}, hidden, flags)

    nb_idx = np.stack([star[t][targets] for t in C.NEIGHBOR_TYPES], axis=1)  # (B, 15)
    present = nb_idx >= 0
    nb = nd.stack([nd.gather_rows(h2[t], nb_idx[:, j]) if t in h2
                   else Tensor(np.zeros((len(targets), h_r.shape[1])))
                   for j, t in enumerate(C.NEIGHBOR_TYPES)], axis=1)
    # query conditioned on the report type embedding (input projection output)
    h_rt = nd.gather_rows(hidden[0]["report_type"], nb_idx[:, C.NEIGHBOR_TYPES.index("report_type")]) \
        if "report_type" in hidden[0] else Tensor(np.zeros(h_r.shape))
    q = nd.add(h_r, h_rt)
    outs, record = [], {}
    for k in heads:
        type_ok = np.array([t in HEAD_TYPES[k] for t in C.NEIGHBOR_TYPES])
        allowed = present & type_ok[None, :]
        o, alphas = attention_head(params, k, q, h_r, nb, allowed, n_heads)
        outs.append(o)
        record[k] = {"alpha": alphas.mean(axis=0), "alpha_heads": alphas, "allowed": allowed,
                     "empty": ~allowed.any(axis=1)}
    z = nd.concat(outs) if len(outs) > 1 else outs[0]
    z = nd.relu(nd.add(nd.matmul(z, params["comb.W1"]), params["comb.b1"]))
    z = nd.layernorm(z, params["comb.ln.g"], params["comb.ln.b"])
    z = nd.add(nd.matmul(z, params["comb.W2"]), params["comb.b2"])
    flags["empty_heads"] = {k: np.nonzero(v["empty"])[0].tolist() for k, v in record.items()}
    return ForwardOutput(_mlp_classifier(params, z), targets, record, hidden, flags)


# ---------------------------------------------------------------- training


@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, loss, val_acc, val_loss, seconds)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    best_val_loss: float = float("inf")
    stopped_epoch: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "val_acc", "val_loss", "seconds"])
            for e, loss, acc, vloss, sec in self.rows:
                w.writerow([e, f"{loss:.6f}", f"{acc:.6f}", f"{vloss:.6f}", f"{sec:.3f}"])


def _batches(idx: np.ndarray, size: int):
    for s in range(0, len(idx), size):
        yield idx[s:s + size]


def predict_logits(variant: str, params, graph: G.HeteroGraph, idx: np.ndarray, batch_size: int = 512,
                   n_heads: int = 4) -> np.ndarray:
    """Inference logits for report indices ``idx`` via closed report subgraphs."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((len(idx), N_CLASSES))
    pos = 0
    for b in _batches(idx, batch_size):
        sub = G.report_subgraph(graph, b)
        res = variant_forward(variant, params, sub, train=False, n_heads=n_heads)
        out[pos:pos + len(b)] = res.logits.value
        pos += len(b)
    return out


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else float("nan")


def train_step(variant: str, params, opt: nd.Adam, batch: G.HeteroGraph, weights: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator, batch_id=None) -> float | None:
    """One optimiser step on the labeled reports of ``batch``; None if it has none."""
    mask = batch.labeled & (batch.y >= 0)
    if not mask.any():
        return None
    order = nd.parameters(params)
    with nd.Tape() as tape:
        out = variant_forward(variant, params, batch, train=True, rng=rng, dropout=cfg.dropout, n_heads=cfg.heads)
        rows = np.nonzero(mask[out.targets])[0]
        logits = nd.gather_rows(out.logits, rows)
        loss = nd.weighted_cross_entropy(logits, batch.y[out.targets][rows], weights)
    value = float(loss.value)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss in batch {batch_id}")
    # types absent from this batch leave some parameters untouched; Adam skips those
    used = [p for p in order if p in tape]
    got = dict(zip(map(id, used), nd.backward(tape, loss, used)))
    opt.step([got.get(id(p)) for p in order])
    return value


def train(graph: G.HeteroGraph, cfg: TrainConfig, log: Callable[[str], None] | None = None,
          val_idx: np.ndarray | None = None):
    """Train with early stopping on validation accuracy; returns (best params, history)."""
    cfg.validate()
    train_idx = np.nonzero((graph.split == 0) & graph.labeled & (graph.y >= 0))[0]
    if len(train_idx) == 0:
        raise ValueError("no labeled training reports")
    if val_idx is None:
        val_idx = np.nonzero(graph.split == 1)[0]
    if len(val_idx) == 0:
        raise ValueError("no validation reports")
    weights = nd.class_weights(graph.y[train_idx])
    params = init_params(cfg)
    opt = nd.Adam(nd.parameters(params), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    hist = History()
    best = None
    since = 0
    # subgraphs are fixed per report; cache them per batch composition lazily
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(train_idx)
        losses = []
        for bi, b in enumerate(_batches(perm, cfg.batch_size)):
            sub = G.report_subgraph(graph, b, cfg.edge_drop, rng, cfg.modality_drop)
            loss = train_step(cfg.variant, params, opt, sub, weights, cfg, rng, batch_id=(epoch, bi))
            if loss is not None:
                losses.append(loss)
        val_logits = predict_logits(cfg.variant, params, graph, val_idx, cfg.eval_batch_size, cfg.heads)
        val_acc = accuracy(val_logits, graph.y[val_idx])
        val_loss = _mean_ce(val_logits, graph.y[val_idx])
        hist.rows.append((epoch, float(np.mean(losses)) if losses else float("nan"), val_acc, val_loss,
                          time.perf_counter() - t0))
        if log:
            log(f"epoch {epoch} loss {hist.rows[-1][1]:.4f} val_acc {val_acc:.4f} val_loss {val_loss:.4f}")
        # ties on accuracy (common once it saturates) go to the lower validation loss
        if val_acc > hist.best_val_acc or (val_acc == hist.best_val_acc and val_loss < hist.best_val_loss):
            hist.best_val_acc, hist.best_val_loss, hist.best_epoch = val_acc, val_loss, epoch
            best = {k: v.value.copy() for k, v in params.items()}
            since = 0
        else:
            since += 1
        hist.stopped_epoch = epoch
        if since >= cfg.patience:
            break
    for k, v in best.items():
        params[k].value = v
    return params, hist


def _mean_ce(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def early_stop_epoch(val_accs, patience: int, val_losses=None) -> int:
    """Epoch (1-based) at which training stops, using the same selection rule as ``train``."""
    losses = val_losses if val_losses is not None else [0.0] * len(val_accs)
    best, best_loss, since = -np.inf, np.inf, 0
    for e, (a, l) in enumerate(zip(val_accs, losses), start=1):
        if a > best or (a == best and l < best_loss):
            best, best_loss, since = a, l, 0
        else:
            since += 1
        if since >= patience:
            return e
    return len(val_accs)


# ---------------------------------------------------------------- persistence


def save_model(directory: str | Path, params, cfg: TrainConfig, history: History | None = None,
               extra: dict | None = None) -> dict:
    meta = {"config": asdict(cfg), "config_hash": C.stable_hash(asdict(cfg))}
    if history is not None:
        meta["best_epoch"] = history.best_epoch
        meta["best_val_acc"] = history.best_val_acc
        meta["best_val_loss"] = history.best_val_loss
        meta["stopped_epoch"] = history.stopped_epoch
    meta.update(extra or {})
    manifest = nd.save_checkpoint(directory, {k: v.value for k, v in params.items()}, meta)
    if history is not None:
        history.write_csv(Path(directory) / "history.csv")
    return manifest


def load_model(directory: str | Path):
    named, manifest = nd.load_checkpoint(directory)
    cfg = TrainConfig(**manifest["config"])
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in named.items()}
    return params, cfg, manifest


def clone_params(params) -> dict[str, Tensor]:
    return {k: Tensor(copy.deepcopy(v.value), requires_grad=True, name=k) for k, v in params.items()}
