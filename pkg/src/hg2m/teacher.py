"""RSAGE teacher: relational GraphSAGE with GCN-style mean aggregation.

Every relation contributes two edge types, ``name:fwd`` (src -> dst messages)
and ``name:rev`` (dst -> src), each with its own weights per layer. For a node
``v`` of type ``t`` at layer ``l``::

    m_e(v) = (sum_u mult(u, v) h_u + h_v) / (sum_u mult(u, v) + 1)
    h_v    = ReLU(mean_{e into t} (m_e(v) W_e + b_e))

followed by dropout; the target type's last-layer state goes through a
linear head. Types with no incoming edge type pass their state through.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .hetgraph import HeteroGraph, LabeledTarget, SplitSpec
from .nnkernel import (
    Adam,
    Params,
    SoftLabelMatrix,
    copy_params,
    cross_entropy,
    dropout_mask,
    kaiming_uniform,
    softmax,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EdgeType:
    name: str
    relation: int
    reverse: bool
    src_type: int
    dst_type: int


def edge_types(g: HeteroGraph) -> list[EdgeType]:
    out = []
    for r, rel in enumerate(g.relations):
        out.append(EdgeType(f"{rel.name}:fwd", r, False, rel.src_type, rel.dst_type))
        out.append(EdgeType(f"{rel.name}:rev", r, True, rel.dst_type, rel.src_type))
    return out


def in_adjacency(g: HeteroGraph, et: EdgeType) -> sp.csr_matrix:
    """CSR with rows = message receivers, cols = senders, values = multiplicity."""
    return g.adjacency[et.relation] if et.reverse else g.reverse_adjacency[et.relation]


class GraphOps:
    """Per-graph normalized aggregation operators, built once and reused."""

    def __init__(self, g: HeteroGraph, dtype=np.float32):
        self.graph = g
        self.edge_types = edge_types(g)
        self.in_adj = [in_adjacency(g, et) for et in self.edge_types]
        self.inv = []
        self.S = []
        self.St = []
        for a in self.in_adj:
            deg = np.asarray(a.sum(axis=1), dtype=np.float64).ravel()
            inv = 1.0 / (deg + 1.0)
            s = sp.diags(inv) @ a.astype(np.float64)
            s = s.tocsr().astype(dtype)
            self.inv.append(inv.astype(dtype))
            self.S.append(s)
            self.St.append(s.T.tocsr())


class RSAGE:
    def __init__(self, g: HeteroGraph, target_type: int, num_classes: int, hidden: int = 128,
                 num_layers: int = 2, dropout: float = 0.2, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.node_types = g.node_types
        self.relation_names = tuple(r.name for r in g.relations)
        self.edge_types = edge_types(g)
        self.target_type = int(target_type)
        self.num_classes = num_classes
        self.hidden = hidden
        self.num_layers = num_layers
        self.dropout = dropout
        self.dtype = np.dtype(dtype).type
        self.in_etypes = {t: [e for e, et in enumerate(self.edge_types) if et.dst_type == t]
                          for t in range(len(g.node_types))}
        self.needed = self._needed_types()
        self.params: Params = {}
        for t in sorted(self.needed[0]):
            x = g.features[t]
            if x is None:
                raise ValueError(f"node type {g.node_types[t]} has no features and no derivation rule")
            self.params[f"proj.{g.node_types[t]}.W"] = kaiming_uniform(rng, x.shape[1], hidden, self.dtype)
            self.params[f"proj.{g.node_types[t]}.b"] = np.zeros(hidden, dtype=self.dtype)
        for l in range(1, num_layers + 1):
            for t in sorted(self.needed[l]):
                for e in self.in_etypes[t]:
                    name = self.edge_types[e].name
                    self.params[f"layer{l}.{name}.W"] = kaiming_uniform(rng, hidden, hidden, self.dtype)
                    self.params[f"layer{l}.{name}.b"] = np.zeros(hidden, dtype=self.dtype)
        self.params["head.W"] = kaiming_uniform(rng, hidden, num_classes, self.dtype)
        self.params["head.b"] = np.zeros(num_classes, dtype=self.dtype)

    def _needed_types(self) -> list[set[int]]:
        needed = [set() for _ in range(self.num_layers + 1)]
        needed[self.num_layers] = {self.target_type}
        for l in range(self.num_layers, 0, -1):
            prev = set(needed[l])
            for t in needed[l]:
                prev.update(self.edge_types[e].src_type for e in self.in_etypes[t])
            needed[l - 1] = prev
        return needed

    def _p(self, kind: str, key: str, l: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        prefix = kind if l is None else f"{kind}{l}"
        return self.params[f"{prefix}.{key}.W"], self.params[f"{prefix}.{key}.b"]

    def meta(self) -> dict:
        return {
            "model": "rsage",
            "node_types": list(self.node_types),
            "relations": list(self.relation_names),
            "edge_types": [et.name for et in self.edge_types],
            "target_type": self.target_type,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "num_layers": self.num_layers,
            "dropout": self.dropout,
        }

    @classmethod
    def from_params(cls, g: HeteroGraph, params: Params, meta: dict) -> "RSAGE":
        """Rebuild a teacher from checkpoint parameters; the graph schema must match."""
        if meta.get("model") != "rsage":
            raise ValueError("checkpoint does not hold an RSAGE teacher")
        if list(meta["node_types"]) != list(g.node_types) or \
                list(meta["relations"]) != [r.name for r in g.relations]:
            raise ValueError("checkpoint node types or relations differ from the graph")
        m = cls(g, meta["target_type"], meta["num_classes"], meta["hidden"], meta["num_layers"], meta["dropout"])
        if set(params) != set(m.params) or any(params[k].shape != v.shape for k, v in m.params.items()):
            raise ValueError("checkpoint parameters do not match the architecture")
        m.params = {k: params[k].astype(m.dtype) for k in m.params}
        return m

    # ------------------------------------------------------------ full graph

    def forward(self, ops: GraphOps, train: bool = False, rng: np.random.Generator | None = None):
        """Logits for every target node plus a cache for :meth:`backward`."""
        g = ops.graph
        H = {}
        for t in sorted(self.needed[0]):
            W, b = self._p("proj", self.node_types[t])
            H[t] = g.features[t].astype(self.dtype, copy=False) @ W + b
        layers = []
        for l in range(1, self.num_layers + 1):
            newH, lcache = {}, {}
            for t in sorted(self.needed[l]):
                ets = self.in_etypes[t]
                if not ets:
                    newH[t] = H[t]
                    lcache[t] = None
                    continue
                Z = np.zeros((H[t].shape[0], self.hidden), dtype=self.dtype)
                Ms = []
                for e in ets:
                    et = self.edge_types[e]
                    M = ops.S[e] @ H[et.src_type] + ops.inv[e][:, None] * H[t]
                    W, b = self._p("layer", et.name, l)
                    Z += M @ W + b
                    Ms.append(M)
                Z /= len(ets)
                A = np.maximum(Z, 0)
                mask = dropout_mask(rng, A.shape, self.dropout, self.dtype) if train else None
                newH[t] = A if mask is None else A * mask
                lcache[t] = (Z, mask, Ms)
            layers.append((H, lcache))
            H = newH
        hT = H[self.target_type]
        W, b = self.params["head.W"], self.params["head.b"]
        return hT @ W + b, (layers, hT)

    def backward(self, ops: GraphOps, cache, dlogits: np.ndarray) -> Params:
        g = ops.graph
        layers, hT = cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        d = dlogits.astype(self.dtype, copy=False)
        grads["head.W"] = hT.T @ d
        grads["head.b"] = d.sum(axis=0, dtype=np.float64).astype(self.dtype)
        dH = {self.target_type: d @ self.params["head.W"].T}
        for l in range(self.num_layers, 0, -1):
            Hprev, lcache = layers[l - 1]
            dprev = {t: np.zeros_like(h) for t, h in Hprev.items()}
            for t, dh in dH.items():
                c = lcache[t]
                if c is None:
                    dprev[t] += dh
                    continue
                Z, mask, Ms = c
                ets = self.in_etypes[t]
                dZ = dh if mask is None else dh * mask
                dZ = dZ * (Z > 0) / self.dtype(len(ets))
                for e, M in zip(ets, Ms):
                    et = self.edge_types[e]
                    W, _ = self._p("layer", et.name, l)
                    grads[f"layer{l}.{et.name}.W"] += M.T @ dZ
                    grads[f"layer{l}.{et.name}.b"] += dZ.sum(axis=0, dtype=np.float64).astype(self.dtype)
                    dM = dZ @ W.T
                    dprev[et.src_type] += ops.St[e] @ dM
                    dprev[t] += ops.inv[e][:, None] * dM
            dH = dprev
        for t, dh in dH.items():
            name = self.node_types[t]
            grads[f"proj.{name}.W"] = g.features[t].astype(self.dtype, copy=False).T @ dh
            grads[f"proj.{name}.b"] = dh.sum(axis=0, dtype=np.float64).astype(self.dtype)
        return grads

    def predict(self, ops: GraphOps) -> np.ndarray:
        return self.forward(ops)[0]

    # ------------------------------------------------------------ computation trees

    def forward_tree(self, g: HeteroGraph, tree: "ComputeTree") -> np.ndarray:
        """Logits for ``tree.roots`` computed only from the fetched nodes."""
        fr = tree.frontiers
        H = {}
        for t, nodes in fr[0].items():
            W, b = self._p("proj", self.node_types[t])
            H[t] = g.features[t][nodes].astype(self.dtype, copy=False) @ W + b
        for l in range(1, self.num_layers + 1):
            newH = {}
            prev = fr[l - 1]
            for t, nodes in fr[l].items():
                hself = H[t][np.searchsorted(prev[t], nodes)]
                ets = self.in_etypes[t]
                if not ets:
                    newH[t] = hself
                    continue
                Z = np.zeros((len(nodes), self.hidden), dtype=self.dtype)
                for e in ets:
                    et = self.edge_types[e]
                    seg, src, mult = tree.blocks[l][e]
                    src_pos = np.searchsorted(prev[et.src_type], src)
                    msg = H[et.src_type][src_pos] * mult.astype(self.dtype)[:, None]
                    agg = hself.copy()
                    np.add.at(agg, seg, msg)
                    cnt = np.bincount(seg, weights=mult, minlength=len(nodes)).astype(self.dtype)
                    M = agg / (cnt + 1)[:, None]
                    W, b = self._p("layer", et.name, l)
                    Z += M @ W + b
                Z /= len(ets)
                newH[t] = np.maximum(Z, 0)
            H = newH
        h = H[self.target_type][np.searchsorted(fr[self.num_layers][self.target_type], tree.roots)]
        return h @ self.params["head.W"] + self.params["head.b"]


@dataclass
class ComputeTree:
    """Nodes fetched per layer (``frontiers[l]`` holds what layer ``l`` computes).

    ``blocks[l][e] = (dst_position, src_node, multiplicity)`` lists the edges of
    edge type ``e`` used to compute layer ``l``.
    """

    roots: np.ndarray
    frontiers: list[dict[int, np.ndarray]]
    blocks: list[dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]] = field(default_factory=list)

    def fetched(self) -> set[tuple[int, int]]:
        out = set()
        for fr in self.frontiers:
            for t, nodes in fr.items():
                out.update((t, int(v)) for v in nodes)
        return out

    def layer_counts(self) -> list[int]:
        return [sum(len(v) for v in fr.values()) for fr in self.frontiers]


def expand_tree(g: HeteroGraph, target_type: int, roots, num_layers: int,
                fanout: list[int] | None = None, rng: np.random.Generator | None = None,
                etypes: list[EdgeType] | None = None, in_adj=None) -> ComputeTree:
    """Reverse-BFS the in-neighborhood of ``roots`` for ``num_layers`` hops.

    With ``fanout``, layer ``l`` keeps at most ``fanout[l-1]`` in-neighbors per
    node and edge type, chosen uniformly without replacement. Sampling order is
    fixed: layers ``L..1``, edge types in declaration order, receivers in
    ascending id; for each (layer, edge type) one ``rng.random(n)`` call draws
    a key per candidate edge, and each receiver keeps its smallest keys.
    """
    etypes = etypes if etypes is not None else edge_types(g)
    in_adj = in_adj if in_adj is not None else [in_adjacency(g, et) for et in etypes]
    if fanout is not None:
        if len(fanout) != num_layers:
            raise ValueError("fanout list length must equal the layer count")
        if rng is None:
            raise ValueError("sampling requires an rng")
    roots = np.unique(np.asarray(roots, dtype=np.int64))
    L = num_layers
    frontiers: list[dict[int, np.ndarray] | None] = [None] * (L + 1)
    blocks: list[dict] = [dict() for _ in range(L + 1)]
    front = {int(target_type): roots}
    frontiers[L] = front
    for l in range(L, 0, -1):
        cap = None if fanout is None else int(fanout[l - 1])
        nxt = {t: v for t, v in front.items()}
        for e, et in enumerate(etypes):
            dst = front.get(et.dst_type)
            if dst is None:
                continue
            a = in_adj[e]
            starts = a.indptr[dst]
            deg = a.indptr[dst + 1] - starts
            total = int(deg.sum())
            seg = np.repeat(np.arange(len(dst), dtype=np.int64), deg)
            offsets = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(deg) - deg, deg)
            idx = np.repeat(starts, deg) + offsets
            src = a.indices[idx].astype(np.int64)
            mult = a.data[idx].astype(np.int64)
            if cap is not None:
                keys = rng.random(total)
                order = np.lexsort((keys, seg))
                rank = offsets  # seg is sorted, so position within segment is unchanged
                keep = np.sort(order[rank < cap]) if total else order
                seg, src, mult = seg[keep], src[keep], mult[keep]
            blocks[l][e] = (seg, src, mult)
            prev = nxt.get(et.src_type)
            nxt[et.src_type] = np.unique(src) if prev is None else np.union1d(prev, src)
        frontiers[l - 1] = nxt
        front = nxt
    return ComputeTree(roots, frontiers, blocks)


# ---------------------------------------------------------------- training / inference


@dataclass
class TeacherConfig:
    hidden: int = 128
    num_layers: int = 2
    dropout: float = 0.2
    lr: float = 0.01
    weight_decay: float = 0.0
    epochs: int = 300
    fanout: tuple[int, ...] = (10, 15)


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)  # epoch, loss, train_acc, val_acc
    best_epoch: int = 0
    best_val_acc: float = float("nan")

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_acc"]
        lines += [f"{e},{loss:.6f},{tr:.6f},{va:.6f}" for e, loss, tr, va in self.rows]
        return "\n".join(lines) + "\n"


def train_teacher(g: HeteroGraph, target: LabeledTarget, split: SplitSpec, config: TeacherConfig,
                  rng: np.random.Generator, ops: GraphOps | None = None) -> tuple[RSAGE, TrainLog]:
    """Full-batch Adam on train-node cross-entropy; keeps the best-validation weights."""
    train_idx = split.train
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    ops = ops if ops is not None else GraphOps(g)
    model = RSAGE(g, target.target_type, target.num_classes, config.hidden, config.num_layers,
                  config.dropout, rng)
    y_train = target.labels[train_idx]
    val_idx = split.valid
    opt = Adam(model.params, lr=config.lr, weight_decay=config.weight_decay)
    trainlog = TrainLog()
    best = copy_params(model.params)
    best_acc = _accuracy(model.predict(ops), target.labels, val_idx)
    trainlog.best_val_acc = best_acc
    for epoch in range(1, config.epochs + 1):
        logits, cache = model.forward(ops, train=True, rng=rng)
        probs = softmax(logits[train_idx])
        loss, d = cross_entropy(probs, y_train)
        if not np.isfinite(loss):
            raise FloatingPointError(f"teacher loss diverged at epoch {epoch}: {loss}")
        dlogits = np.zeros_like(logits)
        dlogits[train_idx] = d
        opt.step(model.params, model.backward(ops, cache, dlogits))
        out = model.predict(ops)
        acc = _accuracy(out, target.labels, val_idx)
        trainlog.rows.append((epoch, loss, _accuracy(out, target.labels, train_idx), acc))
        if acc > best_acc:
            best_acc = acc
            best = copy_params(model.params)
            trainlog.best_epoch = epoch
    model.params = best
    trainlog.best_val_acc = best_acc
    log.debug("teacher best val acc %.4f at epoch %d", best_acc, trainlog.best_epoch)
    return model, trainlog


def _accuracy(logits: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    if len(idx) == 0:
        return float("nan")
    return float(np.mean(logits[idx].argmax(axis=1) == labels[idx]))


def generate_soft_labels(model: RSAGE, ops: GraphOps, scope) -> SoftLabelMatrix:
    """Dropout-free teacher softmax for the target nodes in ``scope`` (in that order)."""
    scope = np.asarray(scope, dtype=np.int64)
    n = ops.graph.node_counts[model.target_type]
    if len(scope) and (scope.min() < 0 or scope.max() >= n):
        raise IndexError("scope contains non-target nodes")
    logits = model.predict(ops)
    return SoftLabelMatrix(softmax(logits[scope].astype(np.float64)))


def sampled_inference(model: RSAGE, g: HeteroGraph, targets, fanout: list[int] | None,
                      seed: int = 0) -> tuple[np.ndarray, list[ComputeTree]]:
    """Per-target tree inference; each target's sampler is seeded by ``(seed, target)``.

    ``fanout=None`` fetches full neighborhoods.
    """
    etypes = model.edge_types
    in_adj = [in_adjacency(g, et) for et in etypes]
    targets = np.asarray(targets, dtype=np.int64)
    out = np.zeros((len(targets), model.num_classes), dtype=model.dtype)
    trees = []
    for i, t in enumerate(targets):
        rng = np.random.default_rng([seed, int(t)]) if fanout is not None else None
        tree = expand_tree(g, model.target_type, [t], model.num_layers, fanout, rng, etypes, in_adj)
        out[i] = model.forward_tree(g, tree)[0]
        trees.append(tree)
    return out, trees
