import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_graph
from hg2m.bench import (
    BenchReport,
    count_fetched,
    layers_vs_fetched,
    mlp_trace,
    pick_targets,
    time_call,
    time_inference,
)
from hg2m.hetgraph import HeteroGraph, Relation
from hg2m.nnkernel import MLP
from hg2m.teacher import RSAGE
from oracles import reachable, sampled_reachable


def _star(d):
    return HeteroGraph.build(["M", "A"], [1, d], [Relation("M-A", 0, 1)],
                             [(np.zeros(d, dtype=int), np.arange(d), None)], [np.ones((1, 2)), np.ones((d, 2))])


@pytest.mark.parametrize("L", [1, 2, 3])
def test_isolated_target_fetches_itself(L):
    g = HeteroGraph.build(["M", "A"], [3, 2], [Relation("M-A", 0, 1)], [([1], [0], None)],
                          [np.ones((3, 2)), np.ones((2, 2))])
    assert count_fetched(g, 0, [2], L).total == 1


@pytest.mark.parametrize("d", [1, 4, 9])
def test_star_center_fetches_its_leaves(d):
    assert count_fetched(_star(d), 0, [0], 1).total == d + 1


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_two_hop_matches_dense_reachability(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, counts=(30, 12, 6), density=0.1)
    targets = rng.choice(30, 5, replace=False)
    tr = count_fetched(g, 0, targets, 2)
    want = reachable(g, 0, targets, 2)
    assert tr.fetched() == want and tr.total == len(want)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_sampled_counts_replay_the_sampler(seed, n):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, counts=(25, 10, 5), density=0.2)
    t = int(rng.integers(25))
    tr = count_fetched(g, 0, [t], 2, [n, n], seed=seed)
    assert tr.fetched() == sampled_reachable(g, 0, t, [n, n], np.random.default_rng([seed, t]))


def test_fetch_ordering():
    rng = np.random.default_rng(0)
    g = random_graph(rng, counts=(80, 20, 10), density=0.15)
    targets = pick_targets(80, 5, seed=1)
    full = count_fetched(g, 0, targets, 2).total
    prev = full
    for n in (20, 10, 5, 1):
        ns = count_fetched(g, 0, targets, 2, [n, n]).total
        assert len(targets) <= ns <= prev
        prev = ns
    assert mlp_trace(0, targets).total == 5
    rows = layers_vs_fetched(g, 0, targets, 3)
    assert [r[0] for r in rows] == [1, 2, 3]
    assert all(a[1] <= b[1] for a, b in zip(rows, rows[1:])) and rows[0][2] == 5


def test_time_call_batches_fast_calls():
    t = time_call(lambda: None, repeats=5, warmup=1)
    assert t.batch > 1 and t.median_ns > 0 and len(t.samples) == 5
    with pytest.raises(ValueError):
        time_call(lambda: None, repeats=0)


@pytest.fixture(scope="module")
def dense_bench():
    rng = np.random.default_rng(5)
    g = random_graph(rng, counts=(300, 40, 15), density=0.2, feature_dim=8)
    teacher = RSAGE(g, 0, 3, hidden=16, num_layers=2, dropout=0.0, rng=rng)
    mlp = MLP(8, 16, 3, dropout=0.0, rng=rng)
    return time_inference(teacher, mlp, g, pick_targets(300, 5), repeats=15, warmup=2, plot_layers=2)


def test_latency_report(dense_bench: BenchReport):
    names = [r.model for r in dense_bench.rows]
    assert names == ["HGNN", "HGNN NS-20", "HGNN NS-15", "HGNN NS-10", "HGNN NS-5", "MLP"]
    assert all(r.median_ms > 0 and r.p95_ms >= r.median_ms for r in dense_bench.rows)
    assert dense_bench.row("MLP").fetched_nodes == 5
    assert dense_bench.row("HGNN").speedup == 1.0
    assert dense_bench.row("HGNN NS-5").median_ms <= dense_bench.row("HGNN").median_ms
    assert dense_bench.row("MLP").speedup > 1
    assert "numpy" in dense_bench.fingerprint
    csv = dense_bench.to_csv("d1")
    assert csv.splitlines()[0] == "# config_digest=d1" and len(csv.splitlines()) == 8
    assert len(dense_bench.plot_csv().splitlines()) == 3
