import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskgraph import config as C
from riskgraph import graph as G
from riskgraph import synthgen as S


def test_feature_dims():
    expected = {**{s: 6 for s in C.SENSORS}, "weather_alert": 13, "pre_alert_type": 13, "pre_alert_time": 6,
                "pre_alert_severity": 3, "drainage": 3, "location": 4, "report_count": 5, "report": 1}
    for t, d in expected.items():
        assert G.FEATURE_DIMS[t] == d
    assert len(C.NODE_TYPES) == 16
    assert len(G.relations()) == 31


def test_quantizer_uniform_rainfall():
    recs = S.generate_dataset(40, 2024, [0.25, 0.35, 0.40], 0)
    values = np.linspace(0, 150, 151)
    fake = []
    for i, v in enumerate(values):
        r = S.ReportRecord.from_dict(recs[i % len(recs)].to_dict())
        r.sensors["rainfall"] = float(v)
        for s in C.SENSORS:
            if s != "rainfall":
                r.sensors[s] = float(i)
        fake.append(r)
    q = G.fit_quantizers(fake)["rainfall"]
    assert q.boundaries == pytest.approx((30, 60, 90, 120))
    assert (q.lo, q.hi) == (0.0, 150.0)


def test_constant_sensor_rejected():
    recs = S.generate_dataset(40, 2024, [0.25, 0.35, 0.40], 0)
    for r in recs:
        r.sensors["wind"] = 3.0
    with pytest.raises(ValueError, match="wind"):
        G.fit_quantizers(recs)


def test_encode_sensor_examples():
    q = {"rainfall": G.Quantizer((30, 60, 90, 120), 0, 150), "humidity": G.Quantizer((20, 40, 60, 80), 0, 100)}
    assert G.encode_node("rainfall", 100.0, q).tolist() == pytest.approx([0, 0, 0, 1, 0, 100 / 150])
    assert G.encode_node("humidity", 55.0, q)[-1] == pytest.approx(0.55)
    h = G.encode_node("humidity", 0.0, q)
    assert h[0] == 1.0 and h[-1] == 0.0


def test_encode_categoricals():
    v = G.encode_node("weather_alert", "none")
    assert v.shape == (13,) and v[0] == 1.0 and v.sum() == 1.0
    assert G.encode_node("pre_alert_time", 0).sum() == 0.0
    assert G.encode_node("pre_alert_time", 24).tolist() == [0, 0, 0, 0, 0, 1]
    assert G.encode_node("report_count", 0).tolist() == [1, 0, 0, 0, 0]
    assert G.encode_node("report_count", 11).tolist() == [0, 0, 0, 0, 1]
    assert G.encode_node("report_count", 5).tolist() == [0, 0, 1, 0, 0]
    with pytest.raises(ValueError):
        G.encode_node("drainage", "flooded")
    with pytest.raises(ValueError):
        G.encode_node("weather_alert", "tornado_warning")


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 150.0, allow_nan=False))
def test_sensor_round_trip(value):
    q = {"rainfall": G.Quantizer((30, 60, 90, 120), 0, 150)}
    v = G.encode_node("rainfall", value, q)
    b = int(np.argmax(v[:5]))
    edges = (-np.inf, 30, 60, 90, 120, np.inf)
    assert edges[b] <= value < edges[b + 1]
    assert abs(v[5] * 150 - value) <= 1e-9 * 150


def test_single_record_graph(small_records, small_quantizers):
    rec = small_records[0]
    g = G.build_graph([rec], small_quantizers)
    partners = [d for d in C.DISTRICT_NAMES if C.DISTRICTS[d].region == C.DISTRICTS[rec.location].region]
    assert g.num_nodes("report") == 1
    assert g.num_nodes("location") == len(partners)
    assert sum(g.num_nodes(t) for t in C.NEIGHBOR_TYPES if t != "location") == 14
    star = g.star_index()
    assert all(star[t][0] >= 0 for t in C.NEIGHBOR_TYPES)
    assert g.edges[G.LOCATION_REL].shape[1] == len(partners) * (len(partners) - 1)
    stats = G.graph_stats(g)
    assert stats["node_types_present"] == 16


def test_relation_symmetry_and_star(small_graph):
    for t in C.NEIGHBOR_TYPES:
        f = small_graph.edges[G.forward_rel(t)]
        r = small_graph.edges[G.reverse_rel(t)]
        assert sorted(map(tuple, f.T)) == sorted(map(tuple, r[::-1].T))
        assert len(np.unique(f[0])) == f.shape[1]
    small_graph.validate()


def test_report_edge_count(small_graph):
    n = small_graph.n_reports
    assert G.graph_stats(small_graph)["report_edges"] == n * 15 * 2


def test_deterministic_hash(small_records, small_quantizers):
    a = G.build_graph(small_records, small_quantizers)
    b = G.build_graph(small_records, small_quantizers)
    assert G.content_hash(a) == G.content_hash(b)
    assert G.graph_stats(a)["hash"] == G.graph_stats(b)["hash"]


def test_unknown_district_rejected(small_records, small_quantizers):
    rec = S.ReportRecord.from_dict(small_records[0].to_dict())
    rec.location = "atlantis"
    with pytest.raises(ValueError, match="district"):
        G.build_graph([rec], small_quantizers)


class _DropTwo:
    hash = "drop-two"

    def retained(self, category, risk):
        if category == "fine_dust_report":
            return frozenset(C.NEIGHBOR_TYPES) - {"wind", "snowfall"}
        return frozenset(C.NEIGHBOR_TYPES)


def test_prune_like_removes_types(small_records, small_quantizers):
    g = G.build_graph(small_records, small_quantizers, _DropTwo())
    star = g.star_index()
    fd = g.category == C.CATEGORY_NAMES.index("fine_dust_report")
    present = np.stack([star[t] >= 0 for t in C.NEIGHBOR_TYPES], axis=1)
    assert np.all(present[fd].sum(axis=1) == 13)
    assert np.all(present[~fd].sum(axis=1) == 15)
    assert g.provenance["prune_spec"] == "drop-two"


def test_save_load_round_trip(tmp_path, small_graph):
    G.save_graph(small_graph, tmp_path)
    back = G.load_graph(tmp_path)
    assert G.content_hash(back) == G.content_hash(small_graph)
    raw = np.frombuffer((tmp_path / "features" / "rainfall.bin").read_bytes(), dtype="<f4")
    assert raw.size == small_graph.x["rainfall"].size


def test_report_subgraph_is_closed(small_graph):
    idx = np.array([0, 5, 9])
    sub = G.report_subgraph(small_graph, idx)
    assert sub.n_reports == 3
    # every location edge stays within one report's private group
    star = sub.star_index()
    own = star["location"]
    assert len(set(own.tolist())) == 3
    for t in C.SENSORS:
        assert np.allclose(sub.x[t][star[t]], small_graph.x[t][small_graph.star_index()[t][idx]])


def test_modality_drop_bounds(small_graph):
    with pytest.raises(ValueError):
        G.report_subgraph(small_graph, np.arange(3), modality_drop=0.6, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        G.report_subgraph(small_graph, np.arange(3), edge_drop=0.2)


def test_edge_reduction_resolution():
    a = {"total_edges": 3000, "edges": {"r": 3000}}
    b = {"total_edges": 2190, "edges": {"r": 2190}}
    assert G.edge_reduction(a, b)["total_reduction_pct"] == 27.0
