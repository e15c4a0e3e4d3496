"""Heterogeneous graph data model, on-disk format, feature derivation and splits.

A graph directory holds ``manifest.json`` plus binary edge/feature files and
TSV label/split files. Node ids are dense per-type integers; a global node is
the pair ``(type_id, local_id)``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

FEATURE_MAGIC = b"HGF1"
MANIFEST = "manifest.json"
FORMAT_TAG = "hg2m-graph/1"

TRAIN, VALID, TEST = 0, 1, 2
ROLE_NAMES = ("train", "valid", "test")
UNLABELED = -1


class GraphFormatError(ValueError):
    """Raised when an on-disk graph fails validation."""

    def __init__(self, message: str, path: str | Path | None = None, offset: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if offset is not None:
                where += f" @ {offset}"
            where += ": "
        super().__init__(where + message)
        self.path = None if path is None else str(path)
        self.offset = offset


@dataclass(frozen=True)
class Relation:
    name: str
    src_type: int
    dst_type: int


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Immutable typed multigraph.

    ``adjacency[r]`` is CSR with rows = src nodes, cols = dst nodes and values =
    edge multiplicity. ``reverse_adjacency[r]`` is its precomputed transpose.
    ``features[t]`` is a float32 matrix or ``None`` for featureless types.
    """

    node_types: tuple[str, ...]
    node_counts: tuple[int, ...]
    relations: tuple[Relation, ...]
    adjacency: tuple[sp.csr_matrix, ...]
    reverse_adjacency: tuple[sp.csr_matrix, ...]
    features: tuple[np.ndarray | None, ...]

    @classmethod
    def build(cls, node_types, node_counts, relations, edges, features) -> "HeteroGraph":
        """Assemble a graph from per-relation ``(src, dst, mult)`` arrays."""
        node_types = tuple(node_types)
        node_counts = tuple(int(c) for c in node_counts)
        relations = tuple(relations)
        if len(set(node_types)) != len(node_types):
            raise ValueError("duplicate node type name")
        if len({r.name for r in relations}) != len(relations):
            raise ValueError("duplicate relation name")
        adj, rev = [], []
        for rel, (src, dst, mult) in zip(relations, edges):
            for t in (rel.src_type, rel.dst_type):
                if not 0 <= t < len(node_types):
                    raise ValueError(f"relation {rel.name} references undeclared node type {t}")
            a = _coalesce(src, dst, mult, node_counts[rel.src_type], node_counts[rel.dst_type])
            adj.append(a)
            rev.append(a.T.tocsr())
            _canonicalize(rev[-1])
        feats = []
        for t, x in enumerate(features):
            if x is not None:
                x = np.ascontiguousarray(x, dtype=np.float32)
                if x.ndim != 2 or x.shape[0] != node_counts[t]:
                    raise ValueError(
                        f"feature matrix for {node_types[t]} has shape {x.shape}, expected ({node_counts[t]}, d)"
                    )
                x.setflags(write=False)
            feats.append(x)
        return cls(node_types, node_counts, relations, tuple(adj), tuple(rev), tuple(feats))

    def type_id(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            return int(name)
        try:
            return self.node_types.index(name)
        except ValueError:
            raise KeyError(f"unknown node type {name!r}") from None

    def relation_id(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            return int(name)
        for i, r in enumerate(self.relations):
            if r.name == name:
                return i
        raise KeyError(f"unknown relation {name!r}")

    def num_edges(self, rel: int | str | None = None) -> int:
        if rel is None:
            return sum(int(a.nnz) for a in self.adjacency)
        return int(self.adjacency[self.relation_id(rel)].nnz)

    def edges(self, rel: int | str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = self.adjacency[self.relation_id(rel)]
        src = np.repeat(np.arange(a.shape[0], dtype=np.int64), np.diff(a.indptr))
        return src, a.indices.astype(np.int64), a.data.astype(np.int64)

    def with_features(self, node_type, x: np.ndarray | None) -> "HeteroGraph":
        t = self.type_id(node_type)
        feats = list(self.features)
        if x is not None:
            x = np.ascontiguousarray(x, dtype=np.float32)
            if x.shape[0] != self.node_counts[t]:
                raise ValueError(f"feature rows {x.shape[0]} != node count {self.node_counts[t]}")
            x.setflags(write=False)
        feats[t] = x
        return replace(self, features=tuple(feats))

    def with_adjacency(self, adjacency) -> "HeteroGraph":
        adj = tuple(a.tocsr() for a in adjacency)
        for a in adj:
            _canonicalize(a)
        rev = []
        for a in adj:
            r = a.T.tocsr()
            _canonicalize(r)
            rev.append(r)
        return replace(self, adjacency=adj, reverse_adjacency=tuple(rev))


@dataclass(frozen=True, eq=False)
class LabeledTarget:
    target_type: int
    labels: np.ndarray  # int64, UNLABELED for missing
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


@dataclass(frozen=True, eq=False)
class SplitSpec:
    roles: np.ndarray  # int8 in {TRAIN, VALID, TEST}
    inductive: np.ndarray = field(default=None)  # bool mask, subset of test

    def __post_init__(self):
        if self.inductive is None:
            object.__setattr__(self, "inductive", np.zeros(len(self.roles), dtype=bool))
        if np.any(self.inductive & (self.roles != TEST)):
            raise ValueError("inductive nodes must be test nodes")

    @property
    def train(self) -> np.ndarray:
        return np.flatnonzero(self.roles == TRAIN)

    @property
    def valid(self) -> np.ndarray:
        return np.flatnonzero(self.roles == VALID)

    @property
    def test(self) -> np.ndarray:
        return np.flatnonzero(self.roles == TEST)

    @property
    def observed_test(self) -> np.ndarray:
        return np.flatnonzero((self.roles == TEST) & ~self.inductive)

    @property
    def inductive_idx(self) -> np.ndarray:
        return np.flatnonzero(self.inductive)

    @property
    def scope(self) -> np.ndarray:
        """Labeled plus observed unlabeled nodes, i.e. everything but inductive."""
        return np.flatnonzero(~self.inductive)

    def with_inductive(self, mask: np.ndarray) -> "SplitSpec":
        return SplitSpec(self.roles, np.asarray(mask, dtype=bool))


def _coalesce(src, dst, mult, n_src, n_dst) -> sp.csr_matrix:
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    mult = np.ones(len(src), dtype=np.int64) if mult is None else np.asarray(mult, dtype=np.int64)
    if len(src) and (src.min() < 0 or src.max() >= n_src or dst.min() < 0 or dst.max() >= n_dst):
        raise ValueError("edge index out of bounds")
    if np.any(mult < 1):
        raise ValueError("edge multiplicity must be >= 1")
    a = sp.coo_matrix((mult, (src, dst)), shape=(n_src, n_dst)).tocsr()
    _canonicalize(a)
    return a


def _canonicalize(a: sp.csr_matrix) -> None:
    a.sum_duplicates()
    a.sort_indices()
    a.data = a.data.astype(np.int64, copy=False)
    a.indices = a.indices.astype(np.int32, copy=False)
    a.indptr = a.indptr.astype(np.int64, copy=False)


# ---------------------------------------------------------------- file io


def write_features(path: Path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", x.shape[0], x.shape[1]))
        fh.write(x.tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 20 or raw[:4] != FEATURE_MAGIC:
        raise GraphFormatError("bad feature header (expected magic HGF1)", path, 0)
    rows, cols = struct.unpack_from("<QQ", raw, 4)
    expected = 20 + 4 * rows * cols
    if len(raw) != expected:
        raise GraphFormatError(f"payload size {len(raw)} != expected {expected} for {rows}x{cols}", path, 20)
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(rows, cols).astype(np.float32)


def write_edges(path: Path, src, dst, mult) -> None:
    rec = np.stack([src, dst, mult], axis=1).astype("<u4")
    Path(path).write_bytes(rec.tobytes())


def read_edges(path: Path, n_src: int, n_dst: int):
    raw = _read_bytes(path)
    if len(raw) % 12:
        raise GraphFormatError("edge file length not a multiple of 12-byte records", path, len(raw) - len(raw) % 12)
    rec = np.frombuffer(raw, dtype="<u4").reshape(-1, 3).astype(np.int64)
    for col, bound, what in ((0, n_src, "src"), (1, n_dst, "dst")):
        bad = np.flatnonzero(rec[:, col] >= bound)
        if len(bad):
            raise GraphFormatError(f"{what} index {rec[bad[0], col]} out of bounds ({bound})", path, int(bad[0]) * 12)
    bad = np.flatnonzero(rec[:, 2] < 1)
    if len(bad):
        raise GraphFormatError("edge multiplicity must be >= 1", path, int(bad[0]) * 12)
    return rec[:, 0], rec[:, 1], rec[:, 2]


def _read_tsv(path: Path, n: int, parse_value):
    """Yield (node_id, value) from ``node_id<TAB>value`` lines; offset = line number."""
    seen = set()
    out = []
    text = _read_bytes(path).decode("utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError("expected two tab-separated columns", path, lineno)
        try:
            node = int(parts[0])
        except ValueError:
            raise GraphFormatError(f"bad node id {parts[0]!r}", path, lineno) from None
        if not 0 <= node < n:
            raise GraphFormatError(f"node id {node} out of bounds ({n})", path, lineno)
        if node in seen:
            raise GraphFormatError(f"duplicate node id {node}", path, lineno)
        seen.add(node)
        try:
            out.append((node, parse_value(parts[1].strip())))
        except ValueError as exc:
            raise GraphFormatError(str(exc), path, lineno) from None
    return out


def _read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise GraphFormatError("missing file", path) from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- load / save


def load_graph(directory) -> tuple[HeteroGraph, LabeledTarget, SplitSpec]:
    """Load and validate a graph directory.

    Node types declaring ``"derive": {"from": T, "via": R}`` instead of a
    feature file get mean-of-neighbor features after loading.
    """
    root = Path(directory)
    mpath = root / MANIFEST
    try:
        manifest = json.loads(_read_bytes(mpath).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid JSON: {exc.msg}", mpath, exc.pos) from None

    checksums = manifest.get("checksums", {})
    for rel_path, digest in sorted(checksums.items()):
        if _sha256(root / rel_path) != digest:
            raise GraphFormatError("checksum mismatch", root / rel_path)

    ntypes = manifest["node_types"]
    names = [t["name"] for t in ntypes]
    if len(set(names)) != len(names):
        raise GraphFormatError("duplicate node type name", mpath)
    counts = [int(t["count"]) for t in ntypes]

    relations, edges = [], []
    for r in manifest["relations"]:
        if r["src"] not in names or r["dst"] not in names:
            raise GraphFormatError(f"relation {r['name']} references undeclared node type", mpath)
        rel = Relation(r["name"], names.index(r["src"]), names.index(r["dst"]))
        relations.append(rel)
        edges.append(read_edges(root / r["edges"], counts[rel.src_type], counts[rel.dst_type]))

    features = []
    for t, spec in enumerate(ntypes):
        if "features" in spec:
            fpath = root / spec["features"]
            x = read_features(fpath)
            if x.shape[0] != counts[t]:
                raise GraphFormatError(f"shape mismatch: {x.shape[0]} rows, type {names[t]} has {counts[t]} nodes", fpath, 4)
            if "dim" in spec and x.shape[1] != int(spec["dim"]):
                raise GraphFormatError(f"feature-dimension mismatch: {x.shape[1]} != declared {spec['dim']}", fpath, 12)
            features.append(x)
        else:
            features.append(None)

    g = HeteroGraph.build(names, counts, relations, edges, features)
    for t, spec in enumerate(ntypes):
        if "derive" in spec and g.features[t] is None:
            x = derive_features(g, spec["derive"]["from"], spec["derive"]["via"])
            g = g.with_features(t, x)

    tgt = manifest["target"]
    t_id = names.index(tgt["type"])
    n_t = counts[t_id]
    k = int(tgt["num_classes"])
    labels = np.full(n_t, UNLABELED, dtype=np.int64)

    def parse_class(s):
        c = int(s)
        if not 0 <= c < k:
            raise ValueError(f"class {c} outside [0, {k})")
        return c

    for node, c in _read_tsv(root / tgt["labels"], n_t, parse_class):
        labels[node] = c

    roles = np.full(n_t, -1, dtype=np.int8)
    for node, role in _read_tsv(root / tgt["splits"], n_t, _parse_role):
        roles[node] = role
    missing = np.flatnonzero(roles < 0)
    if len(missing):
        raise GraphFormatError(f"node {missing[0]} has no split role", root / tgt["splits"])
    inductive = np.zeros(n_t, dtype=bool)
    if tgt.get("inductive"):
        for node, _ in _read_tsv(root / tgt["inductive"], n_t, lambda s: s):
            if roles[node] != TEST:
                raise GraphFormatError(f"inductive node {node} is not a test node", root / tgt["inductive"])
            inductive[node] = True

    target = LabeledTarget(t_id, labels, k)
    train_labels = labels[roles == TRAIN]
    if np.any(train_labels == UNLABELED):
        raise GraphFormatError("train node without a label", root / tgt["labels"])
    return g, target, SplitSpec(roles, inductive)


def _parse_role(s: str) -> int:
    try:
        return ROLE_NAMES.index(s)
    except ValueError:
        raise ValueError(f"unknown split role {s!r}") from None


def save_graph(directory, g: HeteroGraph, target: LabeledTarget, split: SplitSpec,
               derive: dict | None = None) -> Path:
    """Write ``g`` in the on-disk format. ``derive`` maps featureless type -> (from, via)."""
    root = Path(directory)
    (root / "edges").mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(exist_ok=True)
    derive = derive or {}
    files = []
    ntypes = []
    for t, name in enumerate(g.node_types):
        spec = {"name": name, "count": g.node_counts[t]}
        if name in derive:
            src, via = derive[name]
            spec["derive"] = {"from": src, "via": via}
        elif g.features[t] is not None:
            rel_path = f"features/{name}.hgf"
            write_features(root / rel_path, g.features[t])
            spec["features"] = rel_path
            spec["dim"] = int(g.features[t].shape[1])
            files.append(rel_path)
        ntypes.append(spec)
    rels = []
    for r_id, rel in enumerate(g.relations):
        rel_path = f"edges/{rel.name}.bin"
        write_edges(root / rel_path, *g.edges(r_id))
        files.append(rel_path)
        rels.append({"name": rel.name, "src": g.node_types[rel.src_type],
                     "dst": g.node_types[rel.dst_type], "edges": rel_path})
    with open(root / "labels.tsv", "w", encoding="utf-8") as fh:
        for v in np.flatnonzero(target.labels != UNLABELED):
            fh.write(f"{v}\t{target.labels[v]}\n")
    with open(root / "splits.tsv", "w", encoding="utf-8") as fh:
        for v, role in enumerate(split.roles):
            fh.write(f"{v}\t{ROLE_NAMES[role]}\n")
    files += ["labels.tsv", "splits.tsv"]
    tgt = {"type": g.node_types[target.target_type], "num_classes": target.num_classes,
           "labels": "labels.tsv", "splits": "splits.tsv"}
    if split.inductive.any():
        with open(root / "inductive.tsv", "w", encoding="utf-8") as fh:
            for v in split.inductive_idx:
                fh.write(f"{v}\tinductive\n")
        tgt["inductive"] = "inductive.tsv"
        files.append("inductive.tsv")
    manifest = {
        "format": FORMAT_TAG,
        "node_types": ntypes,
        "relations": rels,
        "target": tgt,
        "checksums": {f: _sha256(root / f) for f in sorted(files)},
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


# ---------------------------------------------------------------- derivation / splits


def derive_features(g: HeteroGraph, source_type, via_relation) -> np.ndarray:
    """Mean of ``source_type`` neighbor features over ``via_relation``.

    Returns the feature matrix for the relation's other endpoint type. Nodes
    without neighbors get the zero vector.
    """
    s = g.type_id(source_type)
    r = g.relation_id(via_relation)
    rel = g.relations[r]
    if rel.src_type == s and rel.dst_type != s:
        a = g.reverse_adjacency[r]  # rows: featureless nodes
    elif rel.dst_type == s and rel.src_type != s:
        a = g.adjacency[r]
    else:
        raise ValueError(f"relation {rel.name} does not connect {g.node_types[s]} to a different type")
    x = g.features[s]
    if x is None:
        raise ValueError(f"source type {g.node_types[s]} has no features")
    b = a.copy()
    b.data = np.ones_like(b.data, dtype=np.float64)
    deg = np.diff(b.indptr).astype(np.float64)
    summed = b @ x.astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(deg[:, None] > 0, summed / deg[:, None], 0.0)
    return out.astype(np.float32)


def split_for_induction(g: HeteroGraph, target: LabeledTarget, split: SplitSpec) -> tuple[HeteroGraph, HeteroGraph]:
    """Return ``(train_time_graph, full_graph)``.

    The train-time graph drops every edge incident to an inductive target and
    isolates non-target nodes whose only links lead to inductive targets. Node
    ids are preserved, so removed nodes simply become isolated.
    """
    if not split.inductive.any():
        return g, g
    t = target.target_type
    dead = [np.zeros(c, dtype=bool) for c in g.node_counts]
    dead[t] = split.inductive.copy()

    # a non-target node survives if it has >= 1 edge to a non-inductive node
    touched = [np.zeros(c, dtype=bool) for c in g.node_counts]
    alive_link = [np.zeros(c, dtype=bool) for c in g.node_counts]
    for r, rel in enumerate(g.relations):
        src, dst, _ = g.edges(r)
        src_dead = dead[rel.src_type][src]
        dst_dead = dead[rel.dst_type][dst]
        touched[rel.src_type][src] = True
        touched[rel.dst_type][dst] = True
        alive_link[rel.src_type][src[~dst_dead]] = True
        alive_link[rel.dst_type][dst[~src_dead]] = True
    for ty in range(len(g.node_types)):
        if ty != t:
            dead[ty] = touched[ty] & ~alive_link[ty]

    adjacency = []
    for r, rel in enumerate(g.relations):
        src, dst, mult = g.edges(r)
        keep = ~dead[rel.src_type][src] & ~dead[rel.dst_type][dst]
        shape = g.adjacency[r].shape
        adjacency.append(sp.csr_matrix((mult[keep], (src[keep], dst[keep])), shape=shape))
    return g.with_adjacency(adjacency), g


def graphs_equal(a: HeteroGraph, b: HeteroGraph) -> bool:
    """Bitwise structural equality (used by determinism checks)."""
    if (a.node_types, a.node_counts, a.relations) != (b.node_types, b.node_counts, b.relations):
        return False
    for x, y in zip(a.adjacency + a.reverse_adjacency, b.adjacency + b.reverse_adjacency):
        if x.shape != y.shape or not (np.array_equal(x.indptr, y.indptr) and np.array_equal(x.indices, y.indices)
                                      and np.array_equal(x.data, y.data)):
            return False
    for x, y in zip(a.features, b.features):
        if (x is None) != (y is None):
            return False
        if x is not None and (x.shape != y.shape or x.tobytes() != y.tobytes()):
            return False
    return True
