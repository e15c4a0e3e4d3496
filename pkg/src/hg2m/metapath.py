"""Meta-path neighbor enumeration via sparse adjacency products."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .hetgraph import UNLABELED, HeteroGraph

DEFAULT_NNZ_BUDGET = 10**8


class MetaPathBudgetError(MemoryError):
    """An intermediate adjacency product would exceed the nonzero budget."""


@dataclass(frozen=True)
class MetaPathStep:
    relation: str
    reverse: bool = False

    def __str__(self):
        return f"{self.relation}:{'rev' if self.reverse else 'fwd'}"


@dataclass(frozen=True)
class MetaPath:
    steps: tuple[MetaPathStep, ...]
    abbreviation: str = ""

    @classmethod
    def parse(cls, spec: Sequence[str] | str, g: HeteroGraph | None = None, abbreviation: str = "") -> "MetaPath":
        """Parse ``["M-A:fwd", "M-A:rev"]`` (or the comma-joined string form)."""
        if isinstance(spec, str):
            spec = [s for s in spec.split(",") if s]
        steps = []
        for item in spec:
            name, _, direction = item.strip().rpartition(":")
            if not name:
                name, direction = direction, "fwd"
            if direction not in ("fwd", "rev"):
                raise ValueError(f"bad meta-path step {item!r}: direction must be fwd or rev")
            steps.append(MetaPathStep(name, direction == "rev"))
        if not steps:
            raise ValueError("empty meta-path")
        mp = cls(tuple(steps), abbreviation)
        if g is not None:
            types = mp.type_chain(g)
            if not abbreviation:
                names = [g.node_types[t] for t in types]
                sep = "" if all(len(n) == 1 for n in names) else "-"
                mp = cls(mp.steps, sep.join(names))
        return mp

    def resolve(self, g: HeteroGraph) -> list[tuple[int, bool]]:
        return [(g.relation_id(s.relation), s.reverse) for s in self.steps]

    def type_chain(self, g: HeteroGraph) -> list[int]:
        chain = []
        for i, (r, rev) in enumerate(self.resolve(g)):
            rel = g.relations[r]
            a, b = (rel.dst_type, rel.src_type) if rev else (rel.src_type, rel.dst_type)
            if chain and chain[-1] != a:
                raise ValueError(
                    f"meta-path type-chain mismatch at step {i}: {g.node_types[chain[-1]]} -> {g.node_types[a]}"
                )
            if not chain:
                chain.append(a)
            chain.append(b)
        return chain

    def is_palindromic(self, g: HeteroGraph) -> bool:
        res = self.resolve(g)
        return res == [(r, not rev) for r, rev in reversed(res)]

    def __str__(self):
        return self.abbreviation or ",".join(map(str, self.steps))


@dataclass(frozen=True, eq=False)
class MetaPathPairSet:
    """Anchor/neighbor pairs sorted by ``(anchor, neighbor)`` with exact path counts."""

    anchors: np.ndarray  # int64
    neighbors: np.ndarray  # int64
    path_counts: np.ndarray  # uint64
    meta_path: MetaPath
    num_nodes: int

    def __len__(self):
        return len(self.anchors)

    @property
    def pairs(self) -> list[tuple[int, int, int]]:
        return list(zip(self.anchors.tolist(), self.neighbors.tolist(), self.path_counts.tolist()))

    def neighbors_of(self, v: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.anchors, [v, v + 1])
        return self.neighbors[lo:hi]

    def without_self_pairs(self) -> "MetaPathPairSet":
        keep = self.anchors != self.neighbors
        return MetaPathPairSet(self.anchors[keep], self.neighbors[keep], self.path_counts[keep],
                               self.meta_path, self.num_nodes)

    def to_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.path_counts.astype(np.int64), (self.anchors, self.neighbors)),
                             shape=(self.num_nodes, self.num_nodes))


def _step_matrix(g: HeteroGraph, r: int, rev: bool) -> sp.csr_matrix:
    return g.reverse_adjacency[r] if rev else g.adjacency[r]


def enumerate_pairs(g: HeteroGraph, p: MetaPath, nnz_budget: int = DEFAULT_NNZ_BUDGET,
                    endpoint_type: int | str | None = None) -> MetaPathPairSet:
    """All (anchor, neighbor) pairs joined by at least one instance of ``p``.

    Counts are entries of ``A_1 @ A_2 @ ... @ A_l`` evaluated left to right in
    exact int64 arithmetic. Before each product the number of partial products
    (an upper bound on the result's nonzeros) is checked against ``nnz_budget``.
    """
    chain = p.type_chain(g)
    if chain[0] != chain[-1]:
        raise ValueError("meta-path endpoints must share a node type")
    if endpoint_type is not None and chain[0] != g.type_id(endpoint_type):
        raise ValueError(f"meta-path endpoints are {g.node_types[chain[0]]}, expected {endpoint_type}")
    steps = p.resolve(g)
    acc = _step_matrix(g, *steps[0]).astype(np.int64)
    for r, rev in steps[1:]:
        nxt = _step_matrix(g, r, rev)
        pattern = acc.copy()
        pattern.data = np.ones_like(pattern.data)
        bound = int((pattern @ np.diff(nxt.indptr).astype(np.int64)).sum())
        if bound > nnz_budget:
            raise MetaPathBudgetError(
                f"meta-path {p}: intermediate product needs {bound} partial products, budget {nnz_budget}"
            )
        acc = (acc @ nxt.astype(np.int64)).tocsr()
        acc.eliminate_zeros()
    acc.sum_duplicates()
    acc.sort_indices()
    anchors = np.repeat(np.arange(acc.shape[0], dtype=np.int64), np.diff(acc.indptr))
    return MetaPathPairSet(anchors, acc.indices.astype(np.int64), acc.data.astype(np.uint64), p, acc.shape[0])


def subgraph(pairs: MetaPathPairSet) -> sp.csr_matrix:
    """Symmetric meta-path subgraph over target nodes, diagonal dropped.

    For non-palindromic paths the elementwise maximum of the pair matrix and
    its transpose is used.
    """
    m = pairs.without_self_pairs().to_matrix()
    out = m.maximum(m.T).tocsr()
    out.sort_indices()
    return out


class Homophily(NamedTuple):
    value: float  # nan when no pair has both endpoints labeled
    known_pairs: int
    unlabeled_pairs: int


def homophily(pairs, labels: np.ndarray) -> Homophily:
    """Fraction of pairs whose endpoints share a label.

    ``pairs`` is a MetaPathPairSet or a ``(anchors, neighbors)`` tuple. Pairs
    touching an unlabeled endpoint are counted separately.
    """
    if isinstance(pairs, MetaPathPairSet):
        a, b = pairs.anchors, pairs.neighbors
    else:
        a, b = (np.asarray(x, dtype=np.int64) for x in pairs)
    la, lb = labels[a], labels[b]
    known = (la != UNLABELED) & (lb != UNLABELED)
    n_known = int(known.sum())
    if n_known == 0:
        return Homophily(float("nan"), 0, int(len(a)))
    same = int((la[known] == lb[known]).sum())
    return Homophily(same / n_known, n_known, int(len(a)) - n_known)
