"""Distillation of teacher soft labels into a graph-free MLP student.

HG2M matches the teacher on every scoped node. HG2M+ adds reliable node
distillation (RND, only confident low-entropy teacher predictions) and
reliable meta-path distillation (RMPD, soft labels of reliable same-class
meta-path neighbors pushed onto the anchor, weighted by a pair classifier).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .hetgraph import UNLABELED, LabeledTarget, SplitSpec
from .metapath import MetaPathPairSet
from .nnkernel import MLP, Adam, SoftLabelMatrix, copy_params, cross_entropy, softmax, weighted_kl

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- reliable nodes


@dataclass(frozen=True, eq=False)
class ReliableSet:
    labeled: np.ndarray  # R^L, sorted node ids
    unlabeled: np.ndarray  # R^U, sorted node ids
    confidence: np.ndarray  # per scoped node, aligned with ``scope``
    entropy: np.ndarray
    scope: np.ndarray
    proportion: float
    eligible_unlabeled: int

    @property
    def nodes(self) -> np.ndarray:
        return np.union1d(self.labeled, self.unlabeled)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.labeled] = True
        m[self.unlabeled] = True
        return m

    def thresholds(self) -> tuple[float, float]:
        """Confidence/entropy thresholds implied by the selected unlabeled set."""
        if len(self.unlabeled) == 0:
            return float("nan"), float("nan")
        pos = np.searchsorted(self.scope, self.unlabeled)
        return float(self.confidence[pos].min()), float(self.entropy[pos].max())


def select_reliable(soft: SoftLabelMatrix, scope, labels: np.ndarray, split: SplitSpec,
                    p: float = 0.9) -> ReliableSet:
    """Percentile selection of reliable nodes.

    Labeled (train) nodes are reliable when the teacher's argmax equals the
    label. Unlabeled nodes are ranked by descending confidence and by
    ascending entropy (ties by node id); the ``round(p * n)`` nodes with the
    smallest ``max`` of the two ranks are kept (at least one when n >= 1).
    """
    scope = np.asarray(scope, dtype=np.int64)
    if len(scope) == 0:
        raise ValueError("empty scope")
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if len(soft) != len(scope):
        raise ValueError("soft labels must align with scope")
    if np.any(np.diff(scope) <= 0):
        order = np.argsort(scope, kind="stable")
        scope = scope[order]
        soft = SoftLabelMatrix(soft.probs[order])
    is_train = np.zeros(len(scope), dtype=bool)
    is_train[np.isin(scope, split.train)] = True
    pred = soft.argmax
    labeled = scope[is_train & (pred == labels[scope])]

    u_pos = np.flatnonzero(~is_train)
    n_u = len(u_pos)
    if n_u == 0:
        chosen = np.empty(0, dtype=np.int64)
    else:
        conf = soft.confidence[u_pos]
        ent = soft.entropy[u_pos]
        ids = scope[u_pos]
        r_c = np.empty(n_u, dtype=np.int64)
        r_c[np.lexsort((ids, -conf))] = np.arange(n_u)
        r_u = np.empty(n_u, dtype=np.int64)
        r_u[np.lexsort((ids, ent))] = np.arange(n_u)
        combined = np.maximum(r_c, r_u)
        count = max(1, int(round(p * n_u)))
        take = np.lexsort((ids, combined))[:count]
        chosen = np.sort(ids[take])
    return ReliableSet(np.sort(labeled), chosen, soft.confidence, soft.entropy, scope, p, n_u)


def loss_rnd(logits: np.ndarray, z: np.ndarray, reliable: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean KL(z_v || y_hat_v) over the reliable nodes; gradient w.r.t. all logits."""
    reliable = np.asarray(reliable, dtype=np.int64)
    if len(reliable) == 0:
        raise ValueError("reliable set is empty")
    pred = softmax(logits[reliable])
    loss, g = weighted_kl(pred, z[reliable], np.full(len(reliable), 1.0 / len(reliable)))
    grad = np.zeros_like(logits)
    np.add.at(grad, reliable, g.astype(logits.dtype))
    return loss, grad


# ---------------------------------------------------------------- reliable meta-path pairs


# mean-loss scale; 1.0 shrinks weights until every pair clears 0.5
DEFAULT_PAIR_REG = 1e-3


@dataclass(frozen=True, eq=False)
class PairRows:
    """Pair features for one meta-path: columns f1 (cosine), f2 (path count), f3 (soft-label dot)."""

    anchors: np.ndarray
    neighbors: np.ndarray
    path_counts: np.ndarray
    features: np.ndarray  # (n, 3) float64
    same_class: np.ndarray | None = None  # bool, training rows only

    def __len__(self):
        return len(self.anchors)

    def subset(self, mask: np.ndarray) -> "PairRows":
        return PairRows(self.anchors[mask], self.neighbors[mask], self.path_counts[mask], self.features[mask],
                        None if self.same_class is None else self.same_class[mask])


def cosine_rows(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; zero-norm rows give 0."""
    xa = xa.astype(np.float64)
    xb = xb.astype(np.float64)
    na = np.linalg.norm(xa, axis=1)
    nb = np.linalg.norm(xb, axis=1)
    dot = np.einsum("ij,ij->i", xa, xb)
    denom = na * nb
    out = np.zeros(len(dot))
    nz = denom > 0
    out[nz] = dot[nz] / denom[nz]
    return np.clip(out, -1.0, 1.0)


def build_pair_classifier_data(pairs: MetaPathPairSet, reliable_mask: np.ndarray, labels: np.ndarray,
                               labeled_mask: np.ndarray, z: np.ndarray, x: np.ndarray,
                               log_path_count: bool = False) -> tuple[PairRows, PairRows]:
    """Split reliable-neighbor pairs into (train rows, test rows).

    Only pairs whose neighbor is reliable are kept, self-pairs dropped. Train
    rows have both endpoints labeled and carry ``same_class``; test rows have
    at least one unlabeled endpoint.
    """
    v, u, c = pairs.anchors, pairs.neighbors, pairs.path_counts
    keep = (u != v) & reliable_mask[u]
    v, u, c = v[keep], u[keep], c[keep]
    f2 = c.astype(np.float64)
    if log_path_count:
        f2 = np.log1p(f2)
    feats = np.column_stack([cosine_rows(x[u], x[v]), f2,
                             np.einsum("ij,ij->i", z[u].astype(np.float64), z[v].astype(np.float64))])
    both = labeled_mask[u] & labeled_mask[v]
    train = PairRows(v[both], u[both], c[both], feats[both], labels[u[both]] == labels[v[both]])
    test = PairRows(v[~both], u[~both], c[~both], feats[~both])
    return train, test


@dataclass
class PairClassifier:
    """L2 logistic regression on standardized pair features.

    When ``prior`` is set the model is degenerate and predicts it everywhere.
    """

    weights: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: float = 0.0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))
    prior: float | None = None
    iterations: int = 0

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        if self.prior is not None:
            return np.full(len(features), self.prior)
        s = ((features - self.mean) / self.std) @ self.weights + self.bias
        return _sigmoid(s)


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s, dtype=np.float64)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def train_pair_classifier(rows: PairRows, reg: float = DEFAULT_PAIR_REG, tol: float = 1e-6,
                          max_iter: int = 1000) -> PairClassifier:
    """Mean logistic loss + ``reg/2 * ||w||^2`` (bias unpenalized), full-batch GD.

    Step size is ``1/L`` with ``L`` the gradient's Lipschitz bound.
    """
    y = rows.same_class
    if y is None or len(y) == 0:
        warnings.warn("no labeled pairs to train the pair classifier; predicting 0.5", RuntimeWarning)
        return PairClassifier(prior=0.5)
    y = y.astype(np.float64)
    prior = float(y.mean())
    if prior in (0.0, 1.0):
        warnings.warn("pair classifier training set has a single class; using the prior", RuntimeWarning)
        return PairClassifier(prior=prior)
    X = rows.features.astype(np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Xs = (X - mean) / std
    n = len(y)
    Xb = np.column_stack([Xs, np.ones(n)])
    lip = 0.25 * np.linalg.eigvalsh(Xb.T @ Xb / n).max() + reg
    step = 1.0 / lip
    theta = np.zeros(Xb.shape[1])
    penal = np.array([1.0, 1.0, 1.0, 0.0])
    it = 0
    for it in range(1, max_iter + 1):
        grad = Xb.T @ (_sigmoid(Xb @ theta) - y) / n + reg * penal * theta
        if np.linalg.norm(grad) <= tol:
            break
        theta -= step * grad
    return PairClassifier(theta[:3].copy(), float(theta[3]), mean, std, None, it)


@dataclass(frozen=True, eq=False)
class ReliablePairSet:
    """M_P for one meta-path: (anchor v, neighbor u, weight p_uv, labeled flag)."""

    anchors: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray
    labeled: np.ndarray
    path_counts: np.ndarray
    name: str = ""

    def __len__(self):
        return len(self.anchors)

    @property
    def unlabeled_part(self) -> tuple[np.ndarray, np.ndarray]:
        m = ~self.labeled
        return self.anchors[m], self.neighbors[m]


def select_reliable_pairs(test_rows: PairRows, classifier: PairClassifier) -> tuple[PairRows, np.ndarray]:
    """Keep test pairs with predicted same-class probability strictly above 0.5.

    Returns the kept rows and their probabilities ``p_uv``.
    """
    prob = classifier.predict_proba(test_rows.features)
    keep = prob > 0.5
    return test_rows.subset(keep), prob[keep]


def build_reliable_pairs(pairs: MetaPathPairSet, reliable: ReliableSet, target: LabeledTarget,
                         split: SplitSpec, z: np.ndarray, x: np.ndarray, reg: float = DEFAULT_PAIR_REG,
                         log_path_count: bool = False) -> tuple[ReliablePairSet, PairClassifier]:
    """Full RMPD selection for one meta-path: M_P = M_P^L (weight 1) + M_P^U (weight p_uv)."""
    n = len(target.labels)
    labeled_mask = np.zeros(n, dtype=bool)
    labeled_mask[split.train] = True
    train, test = build_pair_classifier_data(pairs, reliable.mask(n), target.labels, labeled_mask, z, x,
                                             log_path_count)
    clf = train_pair_classifier(train, reg)
    pos = train.subset(train.same_class)
    sel, p_uv = select_reliable_pairs(test, clf)
    anchors = np.concatenate([pos.anchors, sel.anchors])
    neighbors = np.concatenate([pos.neighbors, sel.neighbors])
    weights = np.concatenate([np.ones(len(pos)), p_uv])
    flag = np.concatenate([np.ones(len(pos), dtype=bool), np.zeros(len(sel), dtype=bool)])
    counts = np.concatenate([pos.path_counts, sel.path_counts])
    order = np.lexsort((neighbors, anchors))
    return (ReliablePairSet(anchors[order], neighbors[order], weights[order], flag[order], counts[order],
                            str(pairs.meta_path)), clf)


def loss_rmpd(logits: np.ndarray, z: np.ndarray, pair_sets: list[ReliablePairSet]) -> tuple[float, np.ndarray]:
    """``mean_P mean_{(u,v) in M_P} p_uv KL(z_u || y_hat_v)``.

    Empty sets add zero; the average runs over all meta-paths.
    """
    grad = np.zeros_like(logits)
    if not pair_sets:
        return 0.0, grad
    if all(len(m) == 0 for m in pair_sets):
        warnings.warn("every reliable pair set is empty; RMPD term is zero", RuntimeWarning)
        return 0.0, grad
    total = 0.0
    n_paths = len(pair_sets)
    probs = softmax(logits)
    for m in pair_sets:
        if len(m) == 0:
            warnings.warn(f"empty reliable pair set for {m.name or 'meta-path'}", RuntimeWarning)
            continue
        w = m.weights / (n_paths * len(m))
        loss, g = weighted_kl(probs[m.anchors], z[m.neighbors], w)
        total += loss
        np.add.at(grad, m.anchors, g.astype(logits.dtype))
    return total, grad


# ---------------------------------------------------------------- student training


@dataclass
class StudentConfig:
    hidden: int = 128
    num_layers: int = 2
    dropout: float = 0.2
    lr: float = 0.01
    weight_decay: float = 0.0
    epochs: int = 300
    lam: float = 0.0
    use_rnd: bool = True  # False: plain KL over the whole scope (HG2M)
    use_rmpd: bool = True


@dataclass
class StudentLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)  # epoch, loss, train_acc, val_acc
    best_epoch: int = 0
    best_val_acc: float = float("nan")

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_acc"]
        lines += [f"{e},{loss:.6f},{tr:.6f},{va:.6f}" for e, loss, tr, va in self.rows]
        return "\n".join(lines) + "\n"


def distillation_loss(logits: np.ndarray, labels: np.ndarray, train_idx: np.ndarray, z: np.ndarray | None,
                      kl_nodes: np.ndarray | None, pair_sets: list[ReliablePairSet], lam: float
                      ) -> tuple[float, np.ndarray]:
    """``lam * CE(train) + (1 - lam) * (KL over kl_nodes + RMPD)`` and its logit gradient."""
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    grad = np.zeros_like(logits)
    total = 0.0
    if lam > 0:
        ce, g = cross_entropy(softmax(logits[train_idx]), labels[train_idx])
        total += lam * ce
        grad[train_idx] += lam * g
    if lam < 1:
        if kl_nodes is not None and len(kl_nodes):
            kl, g = loss_rnd(logits, z, kl_nodes)
            total += (1 - lam) * kl
            grad += (1 - lam) * g
        if pair_sets:
            rm, g = loss_rmpd(logits, z, pair_sets)
            total += (1 - lam) * rm
            grad += (1 - lam) * g
    return total, grad.astype(logits.dtype, copy=False)


def train_student(x: np.ndarray, labels: np.ndarray, split: SplitSpec, config: StudentConfig,
                  rng: np.random.Generator, z: np.ndarray | None = None,
                  kl_nodes: np.ndarray | None = None,
                  pair_sets: list[ReliablePairSet] | None = None,
                  num_classes: int | None = None) -> tuple[MLP, StudentLog]:
    """Train an MLP on target features only; keeps the best-validation weights.

    ``z`` holds teacher soft labels for every target node (rows outside the
    scope are ignored); ``kl_nodes`` is R for HG2M+ or the full scope for HG2M.
    With ``lam == 1`` this is the supervised MLP baseline.
    """
    if not 0 <= config.lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    pair_sets = pair_sets or []
    if z is not None:
        k = z.shape[1]
    elif num_classes is not None:
        k = num_classes
    else:
        k = max(int(labels[labels != UNLABELED].max()) + 1, 2)
    model = MLP(x.shape[1], config.hidden, k, config.num_layers, config.dropout, rng)
    x = np.asarray(x, dtype=model.dtype)
    zt = None if z is None else z.astype(model.dtype)
    train_idx, val_idx = split.train, split.valid
    opt = Adam(model.params, lr=config.lr, weight_decay=config.weight_decay)
    slog = StudentLog()
    best = copy_params(model.params)
    best_acc = _acc(model.predict(x), labels, val_idx)
    for epoch in range(1, config.epochs + 1):
        logits, cache = model.forward(x, train=True, rng=rng)
        loss, dlogits = distillation_loss(logits, labels, train_idx, zt, kl_nodes, pair_sets, config.lam)
        if not np.isfinite(loss):
            raise FloatingPointError(f"student loss diverged at epoch {epoch}")
        opt.step(model.params, model.backward(cache, dlogits))
        out = model.predict(x)
        acc = _acc(out, labels, val_idx)
        slog.rows.append((epoch, loss, _acc(out, labels, train_idx), acc))
        if acc > best_acc:
            best_acc = acc
            best = copy_params(model.params)
            slog.best_epoch = epoch
    model.params = best
    slog.best_val_acc = best_acc
    return model, slog


def _acc(logits, labels, idx) -> float:
    if len(idx) == 0:
        return float("nan")
    return float(np.mean(logits[idx].argmax(axis=1) == labels[idx]))


# ---------------------------------------------------------------- audit dumps


def dump_reliable_tsv(path, reliable: ReliableSet, header: str = "") -> None:
    sel = reliable.mask(int(reliable.scope.max()) + 1)
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for i, v in enumerate(reliable.scope):
            fh.write(f"{v}\t{reliable.confidence[i]:.6f}\t{reliable.entropy[i]:.6f}\t{int(sel[v])}\n")


def dump_pairs_tsv(path, pairs: ReliablePairSet, header: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for v, u, c, w in zip(pairs.anchors, pairs.neighbors, pairs.path_counts, pairs.weights):
            fh.write(f"{v}\t{u}\t{c}\t{w:.6f}\n")
