import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_graph, random_split, random_target
from hg2m.distill import (
    PairClassifier,
    PairRows,
    ReliablePairSet,
    StudentConfig,
    build_pair_classifier_data,
    build_reliable_pairs,
    cosine_rows,
    distillation_loss,
    loss_rmpd,
    loss_rnd,
    select_reliable,
    select_reliable_pairs,
    train_pair_classifier,
    train_student,
)
from hg2m.hetgraph import TEST, TRAIN, VALID, SplitSpec
from hg2m.metapath import MetaPath, enumerate_pairs
from hg2m.nnkernel import MLP, SoftLabelMatrix, kl_div, softmax
from oracles import naive_rmpd, naive_rnd, params_fd_check


def _soft(rng, n, k=3, sharp=2.0):
    return softmax(rng.standard_normal((n, k)) * sharp)


def _split(roles):
    return SplitSpec(np.array(roles, dtype=np.int8))


# ---------------------------------------------------------------- reliable nodes


def test_p_one_keeps_every_unlabeled_node():
    rng = np.random.default_rng(0)
    z = SoftLabelMatrix(_soft(rng, 10))
    split = random_split(rng, 10)
    labels = z.argmax.copy()
    r = select_reliable(z, np.arange(10), labels, split, p=1.0)
    np.testing.assert_array_equal(r.unlabeled, np.sort(np.r_[split.valid, split.test]))
    np.testing.assert_array_equal(r.nodes, np.arange(10))


def test_dominating_node_is_chosen():
    z = SoftLabelMatrix(np.array([[0.99, 0.01], [0.6, 0.4]]))
    r = select_reliable(z, [0, 1], np.array([-1, -1]), _split([TEST, TEST]), p=0.5)
    np.testing.assert_array_equal(r.unlabeled, [0])
    conf, ent = r.thresholds()
    assert conf == pytest.approx(0.99)


def test_labeled_nodes_need_correct_teacher():
    z = SoftLabelMatrix(np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]]))
    r = select_reliable(z, [0, 1, 2], np.array([0, 0, 1]), _split([TRAIN, TRAIN, TEST]), p=1.0)
    np.testing.assert_array_equal(r.labeled, [0])
    np.testing.assert_array_equal(r.unlabeled, [2])


@given(st.integers(0, 10_000), st.integers(1, 30), st.floats(0.01, 1.0))
def test_reliable_set_invariants(seed, n, p):
    rng = np.random.default_rng(seed)
    z = SoftLabelMatrix(_soft(rng, n))
    split = random_split(rng, n) if n >= 3 else _split([TEST] * n)
    labels = rng.integers(0, 3, n)
    r = select_reliable(z, np.arange(n), labels, split, p)
    n_u = n - len(split.train)
    assert len(r.unlabeled) == (max(1, int(round(p * n_u))) if n_u else 0)
    assert len(np.intersect1d(r.labeled, r.unlabeled)) == 0
    assert np.all(np.isin(r.labeled, split.train))
    assert np.all(z.argmax[r.labeled] == labels[r.labeled])


def test_selection_validates_inputs():
    z = SoftLabelMatrix(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        select_reliable(SoftLabelMatrix(np.zeros((0, 2))), [], np.array([]), _split([]), 0.9)
    with pytest.raises(ValueError):
        select_reliable(z, [0], np.array([0]), _split([TEST]), 0.0)


# ---------------------------------------------------------------- RND loss


def test_rnd_zero_when_student_matches_teacher():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((6, 3))
    loss, grad = loss_rnd(logits, softmax(logits), np.arange(6))
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_rnd_single_node_is_plain_kl():
    rng = np.random.default_rng(2)
    logits, z = rng.standard_normal((5, 4)), _soft(rng, 5, 4)
    loss, _ = loss_rnd(logits, z, [3])
    assert loss == pytest.approx(kl_div(softmax(logits[[3]]), z[[3]])[0])


@pytest.mark.parametrize("seed", range(5))
def test_rnd_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    logits, z = rng.standard_normal((20, 4)), _soft(rng, 20, 4)
    nodes = rng.choice(20, 8, replace=False)
    assert loss_rnd(logits, z, nodes)[0] == pytest.approx(naive_rnd(softmax(logits), z, nodes), abs=1e-6)


def test_rnd_rejects_empty_set():
    with pytest.raises(ValueError):
        loss_rnd(np.zeros((2, 2)), np.full((2, 2), 0.5), [])


# ---------------------------------------------------------------- pair features


def test_identical_vectors_have_unit_cosine_and_zero_norm_gives_zero():
    x = np.array([[1.0, 2.0], [0.0, 0.0]])
    np.testing.assert_allclose(cosine_rows(x[[0, 0, 1]], x[[0, 1, 1]]), [1.0, 0.0, 0.0])


def _toy_rows(toy, labels, train_mask, z, x):
    pairs = enumerate_pairs(toy, MetaPath.parse(["M-A:fwd", "M-A:rev"], toy))
    return build_pair_classifier_data(pairs, np.ones(4, dtype=bool), labels, train_mask, z, x)


def test_toy_pair_features(toy):
    z = np.eye(2)[[0, 0, 1, 1]]
    x = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [1.0, 1.0]])
    train, test = _toy_rows(toy, np.array([0, 0, 1, 1]), np.array([True, True, False, False]), z, x)
    allrows = {(int(v), int(u)): f for rows in (train, test) for v, u, f in zip(rows.anchors, rows.neighbors, rows.features)}
    assert (0, 0) not in allrows
    f = allrows[(0, 1)]
    assert f[0] == pytest.approx(1.0) and f[1] == 1 and f[2] == pytest.approx(1.0)
    assert allrows[(0, 2)][2] == pytest.approx(0.0)
    np.testing.assert_array_equal(train.anchors, [0, 1])
    np.testing.assert_array_equal(train.same_class, [True, True])
    assert test.same_class is None


@given(st.integers(0, 10_000))
def test_pair_feature_ranges(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, counts=(10, 4, 3), density=0.4)
    pairs = enumerate_pairs(g, MetaPath.parse(["M-A:fwd", "M-A:rev"], g))
    rel = rng.random(10) < 0.7
    train_mask = rng.random(10) < 0.5
    z = _soft(rng, 10)
    tr, te = build_pair_classifier_data(pairs, rel, rng.integers(0, 3, 10), train_mask, z, g.features[0])
    for rows in (tr, te):
        f = rows.features
        assert np.all((f[:, 0] >= -1) & (f[:, 0] <= 1))
        assert np.all((f[:, 1] >= 1) & (f[:, 1] == np.round(f[:, 1])))
        assert np.all((f[:, 2] > 0) & (f[:, 2] <= 1 + 1e-12))
        assert np.all(rel[rows.neighbors]) and np.all(rows.anchors != rows.neighbors)
    assert np.all(train_mask[tr.anchors] & train_mask[tr.neighbors])
    assert not np.any(train_mask[te.anchors] & train_mask[te.neighbors])


# ---------------------------------------------------------------- pair classifier


def _rows(features, same=None):
    n = len(features)
    ids = np.arange(n)
    return PairRows(ids, ids + 1, np.ones(n, dtype=np.uint64), np.asarray(features, dtype=np.float64),
                    None if same is None else np.asarray(same, dtype=bool))


def test_classifier_fits_separable_rows():
    rng = np.random.default_rng(3)
    y = rng.random(200) < 0.5
    f = rng.standard_normal((200, 3))
    f[:, 0] += np.where(y, 3.0, -3.0)
    clf = train_pair_classifier(_rows(f, y))
    assert np.mean((clf.predict_proba(f) > 0.5) == y) >= 0.99


def test_single_class_uses_prior():
    with pytest.warns(RuntimeWarning):
        clf = train_pair_classifier(_rows(np.ones((4, 3)), [True] * 4))
    np.testing.assert_array_equal(clf.predict_proba(np.zeros((3, 3))), [1.0] * 3)


def test_no_training_rows_predicts_half():
    with pytest.warns(RuntimeWarning):
        clf = train_pair_classifier(_rows(np.zeros((0, 3)), []))
    assert clf.prior == 0.5


def test_duplication_leaves_weights_unchanged():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((30, 3))
    y = f[:, 0] + 0.5 * rng.standard_normal(30) > 0
    a = train_pair_classifier(_rows(f, y))
    b = train_pair_classifier(_rows(np.vstack([f, f]), np.r_[y, y]))
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-8)
    assert a.bias == pytest.approx(b.bias, abs=1e-8)


def test_threshold_is_strict():
    sel, p = select_reliable_pairs(_rows(np.zeros((3, 3))), PairClassifier(prior=0.5))
    assert len(sel) == 0 and len(p) == 0
    clf = PairClassifier(weights=np.array([1.0, 0, 0]))
    sel, p = select_reliable_pairs(_rows([[0.0, 0, 0], [1e-9, 0, 0], [-1.0, 0, 0]]), clf)
    np.testing.assert_array_equal(sel.anchors, [1])


def test_degenerate_prior_keeps_everything():
    sel, p = select_reliable_pairs(_rows(np.zeros((5, 3))), PairClassifier(prior=0.8))
    assert len(sel) == 5
    np.testing.assert_array_equal(p, 0.8)


@given(st.integers(0, 10_000))
def test_reliable_pair_set_invariants(seed):
    rng = np.random.default_rng(seed)
    n = 14
    g = random_graph(rng, counts=(n, 5, 3), density=0.35)
    target, split = random_target(rng, n), random_split(rng, n)
    z = _soft(rng, n)
    rel = select_reliable(SoftLabelMatrix(z), np.arange(n), target.labels, split, 0.7)
    raw = enumerate_pairs(g, MetaPath.parse(["M-A:fwd", "M-A:rev"], g))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        m, _ = build_reliable_pairs(raw, rel, target, split, z, g.features[0])
    raw_set = set(zip(raw.anchors.tolist(), raw.neighbors.tolist()))
    assert set(zip(m.anchors.tolist(), m.neighbors.tolist())) <= raw_set
    assert np.all(np.isin(m.neighbors, rel.nodes)) and np.all(m.anchors != m.neighbors)
    np.testing.assert_array_equal(m.weights[m.labeled], 1.0)
    assert np.all(m.weights[~m.labeled] > 0.5)
    lab = target.labels
    assert np.all(lab[m.anchors[m.labeled]] == lab[m.neighbors[m.labeled]])


# ---------------------------------------------------------------- RMPD loss


def _pairset(v, u, w, name=""):
    v, u, w = (np.asarray(a) for a in (v, u, w))
    return ReliablePairSet(v, u, w.astype(float), np.zeros(len(v), dtype=bool), np.ones(len(v), dtype=np.uint64), name)


def test_rmpd_zero_when_pair_matches():
    logits = np.array([[2.0, 0.0], [0.0, 1.0]])
    z = softmax(logits[[0, 0]])
    assert loss_rmpd(logits, z, [_pairset([0], [1], [1.0])])[0] == pytest.approx(0.0, abs=1e-12)


def test_rmpd_averages_over_meta_paths():
    rng = np.random.default_rng(5)
    logits, z = rng.standard_normal((4, 3)), _soft(rng, 4)
    a = _pairset([0, 1], [2, 3], [1.0, 0.7])
    one = loss_rmpd(logits, z, [a])[0]
    assert loss_rmpd(logits, z, [a, a])[0] == pytest.approx(one)


@pytest.mark.parametrize("seed", range(5))
def test_rmpd_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    n = 15
    logits, z = rng.standard_normal((n, 4)), _soft(rng, n, 4)
    sets = [_pairset(rng.integers(0, n, m), rng.integers(0, n, m), rng.uniform(0.5, 1, m)) for m in (7, 3, 0)]
    with pytest.warns(RuntimeWarning):
        got = loss_rmpd(logits, z, sets)[0]
    assert got == pytest.approx(naive_rmpd(softmax(logits), z, sets), abs=1e-6)


def test_rmpd_all_empty_is_zero():
    with pytest.warns(RuntimeWarning):
        loss, grad = loss_rmpd(np.zeros((2, 2)), np.full((2, 2), 0.5), [_pairset([], [], [])])
    assert loss == 0.0 and not grad.any()


@given(st.integers(0, 10_000))
def test_rmpd_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 10
    logits, z = rng.standard_normal((n, 3)), _soft(rng, n)
    sets = [_pairset(rng.integers(0, n, m), rng.integers(0, n, m), rng.uniform(0.5, 1, m)) for m in (6, 4)]
    base_l, base_g = loss_rmpd(logits, z, sets)
    shuffled = []
    for s in sets[::-1]:
        o = rng.permutation(len(s))
        shuffled.append(_pairset(s.anchors[o], s.neighbors[o], s.weights[o]))
    l2, g2 = loss_rmpd(logits, z, shuffled)
    assert l2 == pytest.approx(base_l, rel=1e-12)
    np.testing.assert_allclose(g2, base_g, atol=1e-12)


# ---------------------------------------------------------------- combined objective


@pytest.mark.parametrize("seed", range(3))
def test_combined_objective_gradient(seed):
    rng = np.random.default_rng(seed)
    n, d, k = 12, 4, 3
    x = rng.standard_normal((n, d))
    labels = rng.integers(0, k, n)
    train = np.array([0, 1, 2, 3])
    z = _soft(rng, n, k)
    kl_nodes = np.array([1, 4, 5, 7, 9])
    sets = [_pairset([4, 5, 6], [1, 7, 9], [1.0, 0.8, 0.6]), _pairset([8, 2], [5, 10], [0.9, 1.0])]
    m = MLP(d, 5, k, 2, dropout=0.0, rng=rng, dtype=np.float64)
    for b in ("b0", "b1"):
        m.params[b][:] = rng.uniform(0.05, 0.2, m.params[b].shape)

    def loss():
        return distillation_loss(m.forward(x)[0], labels, train, z, kl_nodes, sets, 0.3)[0]

    logits, cache = m.forward(x)
    grads = m.backward(cache, distillation_loss(logits, labels, train, z, kl_nodes, sets, 0.3)[1])
    assert params_fd_check(loss, grads, m.params) <= 1e-3


def test_lambda_out_of_range():
    with pytest.raises(ValueError):
        distillation_loss(np.zeros((2, 2)), np.zeros(2, dtype=int), np.array([0]), None, None, [], 1.5)
    with pytest.raises(ValueError):
        train_student(np.zeros((2, 2)), np.zeros(2, dtype=int), _split([TRAIN, VALID]),
                      StudentConfig(lam=-0.1), np.random.default_rng(0))


def _student_fixture(seed=0, n=40):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, n)
    x = rng.standard_normal((n, 5)) + np.eye(3)[labels] @ rng.standard_normal((3, 5)) * 2
    return x, labels, random_split(rng, n), _soft(rng, n)


def test_lambda_one_is_the_supervised_mlp():
    x, labels, split, z = _student_fixture()
    cfg = StudentConfig(hidden=8, epochs=30, lam=1.0)
    a, _ = train_student(x, labels, split, cfg, np.random.default_rng(1), z=z, kl_nodes=np.arange(40),
                         pair_sets=[_pairset([0], [1], [1.0])])
    b, _ = train_student(x, labels, split, cfg, np.random.default_rng(1), num_classes=3)
    for key in a.params:
        np.testing.assert_array_equal(a.params[key], b.params[key])


def test_plus_collapses_to_plain_distillation():
    x, labels, split, z = _student_fixture()
    sm = SoftLabelMatrix(z)
    labels = labels.copy()
    labels[split.train] = sm.argmax[split.train]
    rel = select_reliable(sm, np.arange(40), labels, split, p=1.0)
    np.testing.assert_array_equal(rel.nodes, np.arange(40))
    logits = np.random.default_rng(2).standard_normal((40, 3))
    plain = distillation_loss(logits, labels, split.train, z, np.arange(40), [], 0.0)
    plus = distillation_loss(logits, labels, split.train, z, rel.nodes, [], 0.0)
    assert plus[0] == plain[0]
    np.testing.assert_array_equal(plus[1], plain[1])


def test_student_training_is_deterministic():
    x, labels, split, z = _student_fixture()
    cfg = StudentConfig(hidden=8, epochs=20)
    a, la = train_student(x, labels, split, cfg, np.random.default_rng(3), z=z, kl_nodes=np.arange(40))
    b, lb = train_student(x, labels, split, cfg, np.random.default_rng(3), z=z, kl_nodes=np.arange(40))
    assert la.rows == lb.rows
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
