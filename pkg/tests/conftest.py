import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hg2m.hetgraph import TEST, TRAIN, VALID, HeteroGraph, LabeledTarget, Relation, SplitSpec

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def toy_movie_graph(feature_dim: int = 3, seed: int = 0) -> HeteroGraph:
    """Four movies, three actors, two directors (ids are 0-based: M1 -> 0)."""
    rng = np.random.default_rng(seed)
    ma = ([0, 1, 0, 2, 2, 3], [0, 0, 1, 1, 2, 2], None)
    md = ([0, 1, 2, 3], [0, 0, 1, 1], None)
    feats = [rng.standard_normal((4, feature_dim)), rng.standard_normal((3, feature_dim)), None]
    return HeteroGraph.build(["M", "A", "D"], [4, 3, 2],
                             [Relation("M-A", 0, 1), Relation("M-D", 0, 2)], [ma, md], feats)


@pytest.fixture
def toy():
    return toy_movie_graph()


def random_graph(rng: np.random.Generator, counts=(8, 5, 3), density: float = 0.3, max_mult: int = 2,
                 feature_dim: int = 4, featureless=()) -> HeteroGraph:
    """Random M/A/D graph with relations M-A and M-D and optional multiplicities."""
    rels = [Relation("M-A", 0, 1), Relation("M-D", 0, 2)]
    edges = []
    for r in rels:
        ns, nd = counts[r.src_type], counts[r.dst_type]
        mask = rng.random((ns, nd)) < density
        src, dst = np.nonzero(mask)
        mult = rng.integers(1, max_mult + 1, size=len(src))
        edges.append((src, dst, mult))
    feats = [None if t in featureless else rng.standard_normal((c, feature_dim)) for t, c in enumerate(counts)]
    return HeteroGraph.build(["M", "A", "D"], list(counts), rels, edges, feats)


def random_split(rng: np.random.Generator, n: int, fractions=(0.4, 0.2, 0.4)) -> SplitSpec:
    perm = rng.permutation(n)
    n_tr = max(1, int(round(fractions[0] * n)))
    n_va = max(1, int(round(fractions[1] * n)))
    roles = np.full(n, TEST, dtype=np.int8)
    roles[perm[:n_tr]] = TRAIN
    roles[perm[n_tr:n_tr + n_va]] = VALID
    return SplitSpec(roles)


def random_target(rng: np.random.Generator, n: int, k: int = 3) -> LabeledTarget:
    return LabeledTarget(0, rng.integers(0, k, size=n).astype(np.int64), k)


# acceptance lines, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, text: str) -> str:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {text}"
    ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
