"""Deterministic synthetic heterogeneous graphs with controllable homophily.

Layout mirrors a movie database: target type ``M`` (labeled), auxiliary
types ``A`` (actor-like, own community-correlated features) and ``D``
(director-like, featureless; features derived as the mean of its movies).
Each auxiliary node belongs to a class community. A movie links to an
auxiliary node of its own class with probability ``h`` and to a uniformly
chosen other-class node otherwise, so the ``M-X-M`` meta-path homophily is
about ``h^2 + (1 - h)^2 / (k - 1)``; ``h`` is solved from the requested level.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .hetgraph import (
    TEST,
    TRAIN,
    VALID,
    HeteroGraph,
    LabeledTarget,
    Relation,
    SplitSpec,
    derive_features,
    save_graph,
)
from .metapath import DEFAULT_NNZ_BUDGET, MetaPath, enumerate_pairs, homophily

SCALES = {"small": 200, "medium": 5000, "large": 200_000}


@dataclass(frozen=True)
class AuxSpec:
    name: str
    per_target: int  # ~ number of links from each target node (mean of 1 + Poisson)
    ratio: float  # aux nodes per target node
    homophily: float  # requested M-X-M meta-path homophily
    feature_dim: int = 0  # 0 = featureless, derived from target features
    feature_sep: float = 0.0


@dataclass(frozen=True)
class GenSpec:
    num_targets: int = 5000
    num_classes: int = 4
    feature_dim: int = 64
    feature_sep: float = 1.5
    aux: tuple[AuxSpec, ...] = (
        AuxSpec("A", 4, 0.5, 0.8, 32, 1.5),
        AuxSpec("D", 1, 0.1, 0.8),
    )
    fractions: tuple[float, float, float] = (0.2, 0.2, 0.6)
    seed: int = 0
    preset: str = "custom"

    def validate(self) -> None:
        if self.num_targets < self.num_classes:
            raise ValueError("fewer targets than classes")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ValueError("split fractions must be positive and sum to 1")
        for a in self.aux:
            if not 0 <= a.homophily <= 1:
                raise ValueError(f"{a.name}: homophily must be a probability")
            intra_probability(a.homophily, self.num_classes)
            if a.ratio <= 0 or a.per_target < 1:
                raise ValueError(f"{a.name}: infeasible scale")
            n_aux = max(self.num_classes, int(round(a.ratio * self.num_targets)))
            expected_pairs = self.num_targets * a.per_target * (self.num_targets * a.per_target / n_aux)
            if expected_pairs > DEFAULT_NNZ_BUDGET and self.num_targets <= SCALES["medium"]:
                raise ValueError(f"{a.name}: expected meta-path pairs exceed the nonzero budget")


PRESETS = {
    # features decide
    "separable": dict(feature_sep=4.5, aux=(AuxSpec("A", 4, 0.5, 0.95, 32, 1.5), AuxSpec("D", 1, 0.1, 0.95))),
    # structure decides: target features are pure noise
    "structural": dict(feature_sep=0.0, aux=(AuxSpec("A", 4, 0.5, 0.9, 32, 1.5), AuxSpec("D", 1, 0.1, 0.9))),
    # both informative
    "mixed": dict(feature_sep=2.5, aux=(AuxSpec("A", 4, 0.5, 0.5, 32, 1.0), AuxSpec("D", 1, 0.1, 0.5))),
}

LARGE_AUX = {"A": 9, "D": 2}  # mean target degree 11 at the large scale


def preset_spec(preset: str, scale: str = "medium", seed: int = 0) -> GenSpec:
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if scale not in SCALES:
        raise KeyError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    kw = dict(PRESETS[preset])
    if scale == "large":
        kw["aux"] = tuple(replace(a, per_target=LARGE_AUX.get(a.name, a.per_target)) for a in kw["aux"])
    return GenSpec(num_targets=SCALES[scale], seed=seed, preset=f"{preset}/{scale}", **kw)


def intra_probability(h_target: float, k: int) -> float:
    """Solve ``h^2 + (1-h)^2/(k-1) = H`` for the per-link same-class probability."""
    c = 1.0 / (k - 1)
    lo = 1.0 / k
    if h_target < lo - 1e-12 or h_target > 1:
        raise ValueError(f"homophily {h_target} infeasible for {k} classes (minimum {lo:.4f})")
    disc = 4 * c * c - 4 * (1 + c) * (c - h_target)
    return float((2 * c + np.sqrt(max(disc, 0.0))) / (2 * (1 + c)))


def _unit_means(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    m = rng.standard_normal((k, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def generate_arrays(spec: GenSpec):
    """Build ``(graph, target, split, truth)`` in memory."""
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(4 + 2 * len(spec.aux))
    rng_lab, rng_feat, rng_split = (np.random.default_rng(s) for s in streams[:3])
    n, k = spec.num_targets, spec.num_classes

    labels = rng_lab.permutation(np.arange(n) % k).astype(np.int64)
    means = _unit_means(rng_feat, k, spec.feature_dim)
    x_target = spec.feature_sep * means[labels] + rng_feat.standard_normal((n, spec.feature_dim))

    node_types = ["M"]
    counts = [n]
    features: list[np.ndarray | None] = [x_target.astype(np.float32)]
    relations, edges, derive = [], [], {}
    truth = {"intra_probability": {}}
    for i, a in enumerate(spec.aux):
        rng_e = np.random.default_rng(streams[4 + 2 * i])
        n_aux = max(k, int(round(a.ratio * n)))
        community = rng_e.permutation(np.arange(n_aux) % k)
        pools = [np.flatnonzero(community == c) for c in range(k)]
        h = intra_probability(a.homophily, k)
        truth["intra_probability"][a.name] = h
        deg = 1 + rng_e.poisson(a.per_target - 1, size=n) if a.per_target > 1 else np.ones(n, dtype=np.int64)
        src = np.repeat(np.arange(n, dtype=np.int64), deg)
        own = labels[src]
        same = rng_e.random(len(src)) < h
        shift = rng_e.integers(1, k, size=len(src))
        cls = np.where(same, own, (own + shift) % k)
        pool_sizes = np.array([len(p) for p in pools])
        pick = (rng_e.random(len(src)) * pool_sizes[cls]).astype(np.int64)
        offsets = np.concatenate([[0], np.cumsum(pool_sizes)[:-1]])
        flat = np.concatenate(pools)
        dst = flat[offsets[cls] + pick]
        t_id = len(node_types)
        node_types.append(a.name)
        counts.append(n_aux)
        relations.append(Relation(f"M-{a.name}", 0, t_id))
        edges.append((src, dst, None))
        if a.feature_dim:
            rng_f = np.random.default_rng(streams[5 + 2 * i])
            amean = _unit_means(rng_f, k, a.feature_dim)
            xa = a.feature_sep * amean[community] + rng_f.standard_normal((n_aux, a.feature_dim))
            features.append(xa.astype(np.float32))
        else:
            features.append(None)
            derive[a.name] = ("M", f"M-{a.name}")

    g = HeteroGraph.build(node_types, counts, relations, edges, features)
    perm = rng_split.permutation(n)
    n_tr = int(round(spec.fractions[0] * n))
    n_va = int(round(spec.fractions[1] * n))
    roles = np.full(n, TEST, dtype=np.int8)
    roles[perm[:n_tr]] = TRAIN
    roles[perm[n_tr:n_tr + n_va]] = VALID
    target = LabeledTarget(0, labels, k)
    split = SplitSpec(roles)
    return g, target, split, truth, derive


def build(spec: GenSpec):
    """In-memory equivalent of ``generate`` followed by ``load_graph``."""
    g, target, split, truth, derive = generate_arrays(spec)
    for name, (src, via) in derive.items():
        g = g.with_features(name, derive_features(g, src, via))
    return g, target, split, truth


def metapaths_for(g: HeteroGraph) -> list[MetaPath]:
    """Symmetric ``M-X-M`` meta-path for every relation leaving the target type."""
    return [MetaPath.parse([f"{r.name}:fwd", f"{r.name}:rev"], g) for r in g.relations if r.src_type == 0]


def qda_accuracy(x: np.ndarray, labels: np.ndarray, split: SplitSpec, k: int, ridge: float = 1e-3) -> float:
    """Test accuracy of a quadratic-discriminant classifier fit on the train split."""
    x = x.astype(np.float64)
    tr, te = split.train, split.test
    scores = np.empty((len(te), k))
    for c in range(k):
        xc = x[tr][labels[tr] == c]
        mu = xc.mean(axis=0)
        cov = np.cov(xc, rowvar=False) + ridge * np.eye(x.shape[1])
        sign, logdet = np.linalg.slogdet(cov)
        diff = x[te] - mu
        sol = np.linalg.solve(cov, diff.T).T
        scores[:, c] = -0.5 * np.einsum("ij,ij->i", diff, sol) - 0.5 * logdet + np.log(len(xc) / len(tr))
    return float(np.mean(scores.argmax(axis=1) == labels[te]))


def generate(spec: GenSpec, out_dir, measure: bool | None = None) -> Path:
    """Write the graph directory plus ``truth.json``."""
    g, target, split, truth, derive = generate_arrays(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(out, g, target, split, derive=derive)
    measure = spec.num_targets <= SCALES["medium"] if measure is None else measure
    truth["spec"] = _jsonable(asdict(spec))
    truth["metapath_homophily"] = {}
    if measure:
        for mp in metapaths_for(g):
            pairs = enumerate_pairs(g, mp).without_self_pairs()
            truth["metapath_homophily"][mp.abbreviation] = {
                "requested": next(a.homophily for a in spec.aux if mp.abbreviation == f"M{a.name}M"),
                "measured": homophily(pairs, target.labels).value,
                "pairs": len(pairs),
            }
        truth["feature_qda_accuracy"] = qda_accuracy(g.features[0], target.labels, split, target.num_classes)
    truth["mean_target_degree"] = float(sum(g.num_edges(r) for r in range(len(g.relations))) / spec.num_targets)
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
