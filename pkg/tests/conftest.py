import json
from pathlib import Path

import numpy as np
import pytest

from riskgraph import graph as G
from riskgraph import synthgen as S

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_records():
    return S.generate_dataset(660, 2024, [0.25, 0.35, 0.40], 3)


@pytest.fixture(scope="session")
def small_split(small_records):
    return S.split_dataset(small_records, seed=3)


@pytest.fixture(scope="session")
def small_quantizers(small_split):
    return G.fit_quantizers(small_split.train)


@pytest.fixture(scope="session")
def small_graph(small_records, small_split, small_quantizers):
    split, labeled = small_split.arrays(len(small_records))
    return G.build_graph(small_records, small_quantizers, split=split, labeled=labeled)


@pytest.fixture(scope="session")
def reference_table_dict():
    return json.loads((FIXTURES / "reference_importance.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
