import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_split
from hg2m.evalproto import (
    HG2M_PLUS,
    MLP,
    TEACHER,
    EvalReport,
    PipelineConfig,
    accuracy,
    draw_inductive_mask,
    inject_noise,
    prepare_seed,
    prod_value,
    run_production_eval,
    run_seed,
)
from hg2m.synthgen import build, preset_spec


def test_accuracy_cases():
    y = np.array([0, 1, 1, 0])
    assert accuracy(y, y) == 1.0
    assert accuracy(1 - y, y) == 0.0
    assert accuracy(np.array([0, 1, 1, 1]), y) == 0.75
    assert accuracy(np.array([0, 0, 1, 1]), y, np.array([True, False, True, False])) == 1.0
    with pytest.raises(ValueError):
        accuracy(y, y, np.zeros(4, dtype=bool))


def test_prod_formula():
    assert prod_value(0.6, 0.8, 0.2) == 0.2 * 0.6 + 0.8 * 0.8
    assert prod_value(0.6, 0.8, 0.2) == pytest.approx(0.76)
    assert prod_value(float("nan"), 0.81, 0.0) == 0.81


def test_inductive_mask():
    split = random_split(np.random.default_rng(0), 50)
    m = draw_inductive_mask(split, 0.3, np.random.default_rng(1))
    assert m.sum() == round(0.3 * len(split.test))
    assert np.all(np.isin(np.flatnonzero(m), split.test))
    assert not draw_inductive_mask(split, 0.0, np.random.default_rng(1)).any()
    with pytest.raises(ValueError):
        draw_inductive_mask(split, 0.6, np.random.default_rng(1))


def test_noise_alpha_zero_is_standardization():
    x = np.random.default_rng(2).normal(3.0, 2.0, (100, 4))
    out = inject_noise(x, 0.0, 0)
    np.testing.assert_allclose(out, (x - x.mean(0)) / x.std(0), atol=1e-6)


def test_noise_alpha_one_forgets_the_input():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5000, 3))
    out = inject_noise(x, 1.0, 7)
    np.testing.assert_array_equal(out, inject_noise(x * 10 + 1, 1.0, 7))
    corr = [np.corrcoef(x[:, j], out[:, j])[0, 1] for j in range(3)]
    assert np.max(np.abs(corr)) < 4 / np.sqrt(len(x))


@given(st.floats(0, 1), st.integers(0, 1000))
def test_noise_is_seeded(alpha, seed):
    x = np.random.default_rng(seed).standard_normal((6, 2))
    np.testing.assert_array_equal(inject_noise(x, alpha, seed), inject_noise(x, alpha, seed))


def test_noise_rejects_bad_alpha():
    with pytest.raises(ValueError):
        inject_noise(np.zeros((2, 2)), 1.5, 0)


def test_report_without_std_for_one_seed():
    r = EvalReport(["MLP"], [0], 0.2, {"MLP": [{"tran": 0.8, "ind": 0.6}]}, "abc")
    s = r.summary()["MLP"]
    assert "std" not in s["tran"] and s["prod"]["mean"] == pytest.approx(0.76)
    doc = json.loads(r.to_json())
    assert doc["config_digest"] == "abc"
    assert r.to_csv().startswith("# config_digest=abc\n")


def test_report_nan_inductive_serializes_as_null():
    r = EvalReport(["MLP"], [0, 1], 0.0, {"MLP": [{"tran": 0.8, "ind": float("nan")}] * 2})
    assert json.loads(r.to_json())["per_seed"]["MLP"][0]["ind"] is None
    assert r.mean("MLP", "prod") == 0.8 and r.std("MLP", "tran") == 0.0


@pytest.fixture(scope="module")
def separable():
    return build(preset_spec("separable", "small", 0))


def test_inductive_nodes_leave_the_train_graph(separable):
    g, target, split, _ = separable
    sd = prepare_seed(g, target, split, PipelineConfig(), 0, 0.4)
    ind = sd.split.inductive_idx
    assert len(ind) == round(0.4 * len(split.test))
    assert sd.g_train.node_counts[0] == g.node_counts[0]
    for rel, adj in zip(g.relations, sd.g_train.adjacency):
        if rel.src_type == 0:
            assert adj[ind].nnz == 0
        if rel.dst_type == 0:
            assert adj[:, ind].nnz == 0


def test_zero_rate_matches_transductive_run(separable):
    g, target, split, _ = separable
    cfg = PipelineConfig()
    a = run_seed(g, target, split, cfg, 1, (MLP, HG2M_PLUS), 0.0)
    rep = run_production_eval(g, target, split, cfg, [1], 0.0, (MLP, HG2M_PLUS))
    for name in ("MLP", "HG2M+"):
        assert rep.per_seed[name][0]["tran"] == a.accuracy[name]["tran"]
        assert np.isnan(rep.per_seed[name][0]["ind"])
        assert rep.mean(name, "prod") == rep.mean(name, "tran")


def test_parallel_seeds_match_sequential(separable):
    g, target, split, _ = separable
    seq = run_production_eval(g, target, split, PipelineConfig(), [0, 1], 0.2, (MLP, TEACHER))
    par = run_production_eval(g, target, split, PipelineConfig(), [0, 1], 0.2, (MLP, TEACHER), n_jobs=2)
    assert seq.to_csv() == par.to_csv()


def test_rate_has_little_effect_on_separable_fixture(separable):
    g, target, split, _ = separable
    means = []
    for rate in (0.1, 0.2, 0.3, 0.4, 0.5):
        rep = run_production_eval(g, target, split, PipelineConfig(), range(5), rate, (HG2M_PLUS,))
        means.append(rep.mean("HG2M+", "prod"))
    assert max(means) - min(means) < 0.05
