import itertools

import numpy as np
import pytest

from riskgraph import config as C
from riskgraph import explain as E
from riskgraph import graph as G
from riskgraph import prune as P


def brute_top3(cell: dict) -> set:
    """Exhaustive top-3: the 3-subset whose members all outrank every non-member."""
    scores = {t: cell.get(t, 0.0) for t in C.ELIGIBLE_TYPES}
    key = {t: (-s, t) for t, s in scores.items()}
    hits = [set(c) for c in itertools.combinations(scores, 3)
            if all(key[a] < key[b] for a in c for b in scores if b not in c)]
    assert len(hits) == 1
    return hits[0]


@pytest.fixture(scope="module")
def table(reference_table_dict):
    return E.ImportanceTable.from_dict(reference_table_dict)


def test_fixture_has_all_cells(table):
    assert len({c for c, _ in table.cells}) == 11
    assert len(table.cells) == 33


def test_top_only_matches_brute_force(table):
    spec = P.derive_top_only(table)
    for (c, r), cell in table.cells.items():
        assert set(spec.ranked[(c, r)]) == brute_top3(cell)


def test_bottom_excluded_matches_brute_force(table):
    spec = P.derive_bottom_excluded(table)
    for c in {c for c, _ in table.cells}:
        expected = set().union(*(brute_top3(table.cells[(c, r)]) for r in C.RISKS))
        assert set(spec.ranked[c]) == expected


def test_top_only_within_bottom_excluded(table):
    top, bottom = P.derive_top_only(table), P.derive_bottom_excluded(table)
    for c, r in table.cells:
        assert top.retained(c, r) <= bottom.retained(c, r)


def test_structural_and_context_always_retained(table):
    for spec in (P.derive_top_only(table), P.derive_bottom_excluded(table)):
        for c, r in table.cells:
            kept = spec.retained(c, r)
            assert set(C.STRUCTURAL_TYPES) <= kept
            assert set(C.ELIGIBLE_TYPES) - set(C.SENSORS) <= kept


def test_all_mode_can_remove_context(table):
    spec = P.derive_top_only(table, prunable="all")
    assert "drainage" in spec.removed("flood_prevention", "high")
    with pytest.raises(ValueError):
        P.derive_top_only(table, prunable="some")


def test_missing_cell_rejected(reference_table_dict):
    d = dict(reference_table_dict, cells=reference_table_dict["cells"][1:])
    with pytest.raises(ValueError, match="lacks cell"):
        P.derive_bottom_excluded(E.ImportanceTable.from_dict(d))


def test_spec_round_trip_and_leakage_note(tmp_path, table):
    spec = P.derive_top_only(table)
    spec.save(tmp_path / "s.json")
    back = P.PruneSpec.load(tmp_path / "s.json")
    assert back.hash == spec.hash
    assert P.LEAKAGE_NOTE in back.to_dict()["notes"]
    assert P.derive_bottom_excluded(table).to_dict()["notes"] == []


def test_apply_prune_invariants(table, small_records, small_quantizers):
    spec = P.derive_bottom_excluded(table)
    pruned, report, original = P.apply_prune(small_records, small_quantizers, spec)
    assert P.is_subgraph(pruned, original)
    assert report["total_reduction_pct"] > 0
    star = pruned.star_index()
    for t in C.STRUCTURAL_TYPES:
        if t in star:
            assert np.all(star[t] >= 0)
    for i, rec in enumerate(small_records):
        kept = spec.retained(rec.category, rec.risk)
        for t in C.NEIGHBOR_TYPES:
            assert (star[t][i] >= 0) == (t in kept)
    pruned.validate()


def test_top_only_reduces_more(table, small_records, small_quantizers):
    _, rb, _ = P.apply_prune(small_records, small_quantizers, P.derive_bottom_excluded(table))
    _, rt, _ = P.apply_prune(small_records, small_quantizers, P.derive_top_only(table))
    assert rt["total_reduction_pct"] > rb["total_reduction_pct"]
    assert rt["note"] == P.LEAKAGE_NOTE


def test_identity_is_noop(small_records, small_quantizers):
    pruned, report, original = P.apply_prune(small_records, small_quantizers, P.identity_spec())
    assert report["total_reduction_pct"] == 0.0
    assert G.content_hash(pruned) != "" and P.is_subgraph(original, pruned)


def test_uncovered_category_rejected(small_records, small_quantizers):
    spec = P.PruneSpec("bottom_excluded", {"fine_dust_report": ("pm",)})
    with pytest.raises(ValueError, match="does not cover"):
        P.apply_prune(small_records, small_quantizers, spec)


def test_comparison_csv_header():
    rows = [{"model": "inductive", "graph": "full", "edges": 10, "acc": 0.9, "fp": 1.0, "fn": 2.0,
             "train_seconds": 1.5}]
    assert P.comparison_csv(rows).splitlines()[0] == ",".join(P.COMPARISON_COLUMNS)
