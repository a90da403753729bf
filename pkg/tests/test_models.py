import numpy as np
import pytest

from riskgraph import config as C
from riskgraph import graph as G
from riskgraph import models as M
from riskgraph import ndiff as nd


@pytest.mark.parametrize("variant,count", [("inductive", 199_003), ("attention", 314_843), ("multihead", 479_195)])
def test_parameter_counts_at_d128(variant, count):
    assert M.count_params(M.init_params(M.TrainConfig(variant=variant, d=128))) == count


def test_config_validation():
    with pytest.raises(ValueError):
        M.TrainConfig(variant="graphormer").validate()
    with pytest.raises(ValueError):
        M.TrainConfig(d=30, heads=4).validate()
    with pytest.raises(ValueError):
        M.TrainConfig.from_profile("gpu-farm")
    cfg = M.TrainConfig.from_profile("desk", variant="attention")
    assert (cfg.d, cfg.epochs) == (64, 10)


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_forward_shapes(variant, small_graph):
    cfg = M.TrainConfig(variant=variant, d=16, heads=4)
    params = M.init_params(cfg)
    sub = G.report_subgraph(small_graph, np.arange(7))
    out = M.variant_forward(variant, params, sub, n_heads=4)
    assert out.logits.shape == (7, 3)
    assert set(out.attention) == set(M.VARIANT_HEADS[variant])
    for rec in out.attention.values():
        assert rec["alpha_heads"].shape == (4, 7, len(C.NEIGHBOR_TYPES))


def test_heads_only_see_their_types(small_graph):
    params = M.init_params(M.TrainConfig(variant="multihead", d=16))
    out = M.variant_forward("multihead", params, G.report_subgraph(small_graph, np.arange(5)), n_heads=4)
    for k, rec in out.attention.items():
        outside = np.array([t not in M.HEAD_TYPES[k] for t in C.NEIGHBOR_TYPES])
        assert np.all(rec["alpha_heads"][:, :, outside] == 0.0)
        assert np.allclose(rec["alpha_heads"].sum(axis=2), 1.0, atol=1e-5)


def test_sensor_head_query_receives_gradient(small_graph):
    params = M.init_params(M.TrainConfig(variant="multihead", d=16))
    sub = G.report_subgraph(small_graph, np.array([0]))
    with nd.Tape() as tape:
        out = M.variant_forward("multihead", params, sub, n_heads=4)
        loss = nd.weighted_cross_entropy(out.logits, sub.y[out.targets])
    (g,) = nd.backward(tape, loss, [params["head.S.Wq"]])
    assert np.abs(g).sum() > 0


def test_empty_head_flagged(small_graph):
    sub = G.report_subgraph(small_graph, np.arange(4))
    # remove every sensor edge by hand
    for t in C.SENSORS:
        sub.edges[G.forward_rel(t)] = np.zeros((2, 0), dtype=np.int64)
        sub.edges[G.reverse_rel(t)] = np.zeros((2, 0), dtype=np.int64)
    sub._star = None
    sub.__dict__.pop("_adj_cache", None)
    params = M.init_params(M.TrainConfig(variant="multihead", d=16))
    out = M.variant_forward("multihead", params, sub, n_heads=4)
    assert out.flags["empty_heads"]["S"] == [0, 1, 2, 3]
    assert np.all(out.attention["S"]["alpha_heads"] == 0.0)
    assert np.all(np.isfinite(out.logits.value))


def test_early_stop_epoch():
    assert M.early_stop_epoch([0.5, 0.6, 0.6, 0.6], patience=2) == 4
    assert M.early_stop_epoch([0.5, 0.4, 0.3, 0.7], patience=2) == 3
    assert M.early_stop_epoch([0.1, 0.2, 0.3], patience=5) == 3
    # equal accuracy with falling loss keeps resetting patience
    assert M.early_stop_epoch([1.0, 1.0, 1.0, 1.0], patience=2, val_losses=[0.5, 0.4, 0.3, 0.3]) == 4


def test_selection_prefers_lower_loss_on_ties(small_graph):
    cfg = M.TrainConfig(variant="inductive", d=8, epochs=3, batch_size=64, seed=2)
    _, hist = M.train(small_graph, cfg)
    best = max(hist.rows, key=lambda r: (r[2], -r[3]))
    assert hist.best_epoch == best[0]


def test_train_step_without_labels_is_skipped(small_graph):
    cfg = M.TrainConfig(variant="inductive", d=8)
    params = M.init_params(cfg)
    sub = G.report_subgraph(small_graph, np.arange(4))
    sub.labeled[:] = False
    opt = nd.Adam(nd.parameters(params))
    before = {k: v.value.copy() for k, v in params.items()}
    assert M.train_step("inductive", params, opt, sub, np.ones(3), cfg, np.random.default_rng(0)) is None
    assert all(np.array_equal(before[k], params[k].value) for k in params)


def test_short_training_learns_and_round_trips(tmp_path, small_graph):
    cfg = M.TrainConfig(variant="attention", d=16, epochs=3, batch_size=32, lr=3e-3, seed=1)
    params, hist = M.train(small_graph, cfg)
    assert len(hist.rows) == 3
    assert hist.rows[-1][1] < hist.rows[0][1]
    M.save_model(tmp_path, params, cfg, hist)
    back, cfg2, meta = M.load_model(tmp_path)
    assert cfg2 == cfg and meta["best_epoch"] == hist.best_epoch
    idx = np.arange(20)
    a = M.predict_logits("attention", params, small_graph, idx, n_heads=cfg.heads)
    b = M.predict_logits("attention", back, small_graph, idx, n_heads=cfg.heads)
    assert np.allclose(a, b)
    assert (tmp_path / "history.csv").read_text().startswith("epoch,loss,val_acc,val_loss,seconds")


def test_training_is_deterministic(small_graph):
    cfg = M.TrainConfig(variant="inductive", d=8, epochs=2, batch_size=64, seed=4)
    p1, _ = M.train(small_graph, cfg)
    p2, _ = M.train(small_graph, cfg)
    assert all(np.array_equal(p1[k].value, p2[k].value) for k in p1)
