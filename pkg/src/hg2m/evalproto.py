"""Accuracy, the transductive/inductive/production protocol and feature noise."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .distill import (
    DEFAULT_PAIR_REG,
    ReliablePairSet,
    ReliableSet,
    StudentConfig,
    build_reliable_pairs,
    select_reliable,
    train_student,
)
from .hetgraph import HeteroGraph, LabeledTarget, SplitSpec, split_for_induction
from .metapath import MetaPath, enumerate_pairs, homophily
from .teacher import GraphOps, RSAGE, TeacherConfig, generate_soft_labels, train_teacher

log = logging.getLogger(__name__)

# independent RNG streams per seed
STREAM_MASK, STREAM_TEACHER, STREAM_STUDENT, STREAM_NOISE = 1, 2, 3, 4

MAX_IND_RATE = 0.5
MLP_WEIGHT_DECAY = 5e-4


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def accuracy(pred: np.ndarray, truth: np.ndarray, mask=None) -> float:
    """Exact-match fraction on ``mask`` (boolean mask or index array)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if mask is not None:
        mask = np.asarray(mask)
        pred, truth = pred[mask], truth[mask]
    if pred.size == 0:
        raise ValueError("accuracy over an empty mask")
    return float(np.mean(pred == truth))


def inject_noise(x: np.ndarray, alpha: float, rng: np.random.Generator | int) -> np.ndarray:
    """Column-standardize ``x`` then return ``(1 - alpha) x + alpha * eps``, eps ~ N(0, 1)."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    xs = (x - x.mean(axis=0)) / std
    eps = rng.standard_normal(x.shape)
    return ((1 - alpha) * xs + alpha * eps).astype(np.float32)


def draw_inductive_mask(split: SplitSpec, rate: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= rate <= MAX_IND_RATE:
        raise ValueError(f"inductive rate must lie in [0, {MAX_IND_RATE}]")
    test = split.test
    mask = np.zeros(len(split.roles), dtype=bool)
    n_ind = int(round(rate * len(test)))
    if n_ind:
        mask[np.sort(rng.choice(test, size=n_ind, replace=False))] = True
    return mask


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class Variant:
    """One model trained per seed. ``kind`` is ``mlp``, ``teacher`` or ``student``."""

    name: str
    kind: str = "student"
    use_rnd: bool = True
    use_rmpd: bool = True
    lam: float | None = None
    p: float | None = None
    metapaths: tuple[str, ...] | None = None  # subset by abbreviation
    weight_decay: float | None = None


MLP = Variant("MLP", "mlp")
TEACHER = Variant("RSAGE", "teacher")
HG2M = Variant("HG2M", use_rnd=False, use_rmpd=False)
HG2M_RND = Variant("HG2M w/ RND", use_rnd=True, use_rmpd=False)
HG2M_RMPD = Variant("HG2M w/ RMPD", use_rnd=False, use_rmpd=True)
HG2M_PLUS = Variant("HG2M+")
DEFAULT_VARIANTS = (MLP, TEACHER, HG2M, HG2M_PLUS)


@dataclass
class PipelineConfig:
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    mlp_weight_decay: float = MLP_WEIGHT_DECAY
    p: float = 0.9
    metapaths: list[list[str]] | None = None  # None: every M-X-M path
    pair_reg: float = DEFAULT_PAIR_REG
    log_path_count: bool = False
    noise_alpha: float | None = None

    def digest(self) -> str:
        return config_digest(asdict(self))


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SeedResult:
    seed: int
    ind_rate: float
    accuracy: dict[str, dict[str, float]]  # variant -> {"tran": .., "ind": ..}
    diagnostics: dict = field(default_factory=dict)
    teacher: RSAGE | None = None
    students: dict = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)  # "teacher", "distill/p=..", variant names


@dataclass
class DistillArtifacts:
    soft_scope: np.ndarray
    z: np.ndarray  # (n_target, k), zero rows outside the scope
    reliable: ReliableSet
    pair_sets: dict[str, ReliablePairSet]
    raw_pairs: dict


def default_metapaths(g: HeteroGraph, target_type: int) -> list[MetaPath]:
    out = []
    for r in g.relations:
        if r.src_type == target_type and r.dst_type != target_type:
            out.append(MetaPath.parse([f"{r.name}:fwd", f"{r.name}:rev"], g))
        elif r.dst_type == target_type and r.src_type != target_type:
            out.append(MetaPath.parse([f"{r.name}:rev", f"{r.name}:fwd"], g))
    return out


def resolve_metapaths(g: HeteroGraph, target: LabeledTarget, spec) -> list[MetaPath]:
    if spec is None:
        return default_metapaths(g, target.target_type)
    return [MetaPath.parse(s, g) for s in spec]


def prepare_distillation(g_train: HeteroGraph, target: LabeledTarget, split: SplitSpec, teacher: RSAGE,
                         ops_train: GraphOps, cfg: PipelineConfig, p: float,
                         metapaths: list[MetaPath]) -> DistillArtifacts:
    """Soft labels on the scope, reliable set and reliable pairs, all from the train-time graph."""
    scope = split.scope
    soft = generate_soft_labels(teacher, ops_train, scope)
    n = len(target.labels)
    z = np.zeros((n, target.num_classes), dtype=np.float64)
    z[scope] = soft.probs
    reliable = select_reliable(soft, scope, target.labels, split, p)
    x = g_train.features[target.target_type]
    pair_sets, raw = {}, {}
    for mp in metapaths:
        pairs = enumerate_pairs(g_train, mp, endpoint_type=target.target_type)
        m, _ = build_reliable_pairs(pairs, reliable, target, split, z, x, cfg.pair_reg, cfg.log_path_count)
        pair_sets[str(mp)] = m
        raw[str(mp)] = pairs
    return DistillArtifacts(scope, z, reliable, pair_sets, raw)


@dataclass
class SeedData:
    """Graphs and split for one seed after noise injection and the inductive draw."""

    g_train: HeteroGraph
    g_full: HeteroGraph
    split: SplitSpec
    x: np.ndarray  # target features at inference


def prepare_seed(g: HeteroGraph, target: LabeledTarget, split: SplitSpec, cfg: PipelineConfig, seed: int,
                 ind_rate: float = 0.0) -> SeedData:
    t = target.target_type
    if cfg.noise_alpha is not None:
        g = g.with_features(t, inject_noise(g.features[t], cfg.noise_alpha, rng_for(seed, STREAM_NOISE)))
    split = split.with_inductive(draw_inductive_mask(split, ind_rate, rng_for(seed, STREAM_MASK)))
    g_train, g_full = split_for_induction(g, target, split)
    return SeedData(g_train, g_full, split, g_full.features[t])


def student_config(cfg: PipelineConfig, v: Variant) -> StudentConfig:
    lam = 1.0 if v.kind == "mlp" else (cfg.student.lam if v.lam is None else v.lam)
    if v.weight_decay is not None:
        wd = v.weight_decay
    else:  # a purely supervised objective is the MLP baseline
        wd = cfg.mlp_weight_decay if lam == 1 else cfg.student.weight_decay
    return replace(cfg.student, lam=lam, weight_decay=wd)


def train_variant(x: np.ndarray, target: LabeledTarget, split: SplitSpec, cfg: PipelineConfig, seed: int,
                  v: Variant, art: DistillArtifacts | None = None):
    """Train one student (or the MLP baseline when ``v.kind == "mlp"``)."""
    scfg = student_config(cfg, v)
    rng = rng_for(seed, STREAM_STUDENT)
    if v.kind == "mlp":
        return train_student(x, target.labels, split, scfg, rng, num_classes=target.num_classes)
    if art is None:
        raise ValueError(f"{v.name} needs distillation artifacts")
    kl_nodes = art.reliable.nodes if v.use_rnd else art.soft_scope
    pair_sets = []
    if v.use_rmpd:
        names = list(art.pair_sets) if v.metapaths is None else list(v.metapaths)
        missing = set(names) - set(art.pair_sets)
        if missing:
            raise KeyError(f"unknown meta-paths {sorted(missing)}; have {sorted(art.pair_sets)}")
        pair_sets = [art.pair_sets[n] for n in names]
    return train_student(x, target.labels, split, scfg, rng, art.z, kl_nodes, pair_sets)


def score_split(pred: np.ndarray, labels: np.ndarray, split: SplitSpec) -> dict[str, float]:
    ind_idx = split.inductive_idx
    return {"tran": accuracy(pred, labels, split.observed_test),
            "ind": accuracy(pred, labels, ind_idx) if len(ind_idx) else float("nan")}


def run_seed(g: HeteroGraph, target: LabeledTarget, split: SplitSpec, cfg: PipelineConfig, seed: int,
             variants: Sequence[Variant] = DEFAULT_VARIANTS, ind_rate: float = 0.0,
             diagnostics: bool = False, keep_models: bool = False) -> SeedResult:
    """Train every variant for one seed and score it on observed (tran) and inductive (ind) test nodes.

    The teacher is trained once; distillation artifacts are shared by variants with the same ``p``.
    """
    sd = prepare_seed(g, target, split, cfg, seed, ind_rate)
    split, x = sd.split, sd.x
    result = SeedResult(seed, ind_rate, {})
    teacher = ops_train = None
    if any(v.kind in ("teacher", "student") for v in variants):
        t0 = time.perf_counter()
        ops_train = GraphOps(sd.g_train)
        teacher, _ = train_teacher(sd.g_train, target, split, cfg.teacher, rng_for(seed, STREAM_TEACHER), ops_train)
        result.seconds["teacher"] = time.perf_counter() - t0
        if keep_models:
            result.teacher = teacher
    artifacts: dict[float, DistillArtifacts] = {}
    for v in variants:
        if v.kind == "teacher":
            ops_full = ops_train if sd.g_full is sd.g_train else GraphOps(sd.g_full)
            result.accuracy[v.name] = score_split(teacher.predict(ops_full).argmax(axis=1), target.labels, split)
            continue
        art = None
        if v.kind == "student":
            p = cfg.p if v.p is None else v.p
            if p not in artifacts:
                t0 = time.perf_counter()
                paths = resolve_metapaths(sd.g_train, target, cfg.metapaths)
                artifacts[p] = prepare_distillation(sd.g_train, target, split, teacher, ops_train, cfg, p, paths)
                result.seconds[f"distill/p={p}"] = time.perf_counter() - t0
            art = artifacts[p]
        t0 = time.perf_counter()
        model, _ = train_variant(x, target, split, cfg, seed, v, art)
        result.seconds[v.name] = time.perf_counter() - t0
        if keep_models:
            result.students[v.name] = model
        result.accuracy[v.name] = score_split(model.predict(x).argmax(axis=1), target.labels, split)

    if diagnostics and artifacts:
        result.diagnostics = distillation_diagnostics(artifacts.get(cfg.p, next(iter(artifacts.values()))),
                                                      target, split)
    return result


def distillation_diagnostics(art: DistillArtifacts, target: LabeledTarget, split: SplitSpec) -> dict:
    """Reliable-set accuracy and pair homophily (raw vs selected)."""
    labels = target.labels
    pred = art.z.argmax(axis=1)
    unl = np.setdiff1d(art.soft_scope, split.train)
    r_u = art.reliable.unlabeled
    out = {
        "acc_unlabeled": accuracy(pred, labels, unl),
        "acc_reliable_unlabeled": accuracy(pred, labels, r_u) if len(r_u) else float("nan"),
        "acc_reliable": accuracy(pred, labels, art.reliable.nodes),
        "reliable_labeled": len(art.reliable.labeled),
        "train": len(split.train),
        "metapaths": {},
    }
    for name, m in art.pair_sets.items():
        raw = art.raw_pairs[name].without_self_pairs()
        out["metapaths"][name] = {
            "homophily_raw": homophily(raw, labels).value,
            "homophily_selected_unlabeled": homophily(m.unlabeled_part, labels).value,
            "homophily_selected": homophily((m.anchors, m.neighbors), labels).value,
            "pairs_raw": len(raw),
            "pairs_selected": len(m),
        }
    return out


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    models: list[str]
    seeds: list[int]
    ind_rate: float
    per_seed: dict[str, list[dict[str, float]]]  # model -> per-seed {"tran", "ind"}
    config_digest: str = ""

    def _col(self, model: str, setting: str) -> np.ndarray:
        return np.array([r[setting] for r in self.per_seed[model]], dtype=np.float64)

    def mean(self, model: str, setting: str) -> float:
        if setting == "prod":
            return prod_value(self.mean(model, "ind"), self.mean(model, "tran"), self.ind_rate)
        return float(np.mean(self._col(model, setting)))

    def std(self, model: str, setting: str) -> float | None:
        if len(self.seeds) < 2:
            return None
        if setting == "prod":
            vals = [prod_value(r["ind"], r["tran"], self.ind_rate) for r in self.per_seed[model]]
        else:
            vals = self._col(model, setting)
        return float(np.std(vals, ddof=1))

    def summary(self) -> dict:
        out = {}
        for m in self.models:
            out[m] = {}
            for s in ("tran", "ind", "prod"):
                entry = {"mean": self.mean(m, s)}
                sd = self.std(m, s)
                if sd is not None:
                    entry["std"] = sd
                out[m][s] = entry
        return out

    def to_json(self) -> str:
        doc = {"config_digest": self.config_digest, "seeds": self.seeds, "ind_rate": self.ind_rate,
               "summary": self.summary(), "per_seed": self.per_seed}
        return json.dumps(_nan_to_none(doc), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = [f"# config_digest={self.config_digest}", "seed,model,setting,accuracy"]
        for m in self.models:
            for seed, r in zip(self.seeds, self.per_seed[m]):
                for s in ("tran", "ind", "prod"):
                    val = prod_value(r["ind"], r["tran"], self.ind_rate) if s == "prod" else r[s]
                    lines.append(f"{seed},{m},{s},{_fmt(val)}")
        return "\n".join(lines) + "\n"


def prod_value(ind: float, tran: float, rate: float) -> float:
    """Production accuracy ``rate * ind + (1 - rate) * tran``; equals ``tran`` when rate is 0."""
    if rate == 0:
        return tran
    return rate * ind + (1 - rate) * tran


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def run_production_eval(g: HeteroGraph, target: LabeledTarget, split: SplitSpec, cfg: PipelineConfig,
                        seeds: Sequence[int], ind_rate: float = 0.2,
                        variants: Sequence[Variant] = DEFAULT_VARIANTS, n_jobs: int = 1) -> EvalReport:
    """Mean/std over seeds of tran, ind and prod accuracy; seeds may run in separate processes."""
    if not 0 <= ind_rate <= MAX_IND_RATE:
        raise ValueError(f"inductive rate must lie in [0, {MAX_IND_RATE}]")
    per_seed = {v.name: [] for v in variants}
    jobs = [(g, target, split, cfg, seed, tuple(variants), ind_rate) for seed in seeds]
    if n_jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    for res in results:
        for v in variants:
            per_seed[v.name].append(res[v.name])
    digest = config_digest({"pipeline": asdict(cfg), "ind_rate": ind_rate, "seeds": list(seeds),
                            "variants": [asdict(v) for v in variants]})
    return EvalReport([v.name for v in variants], list(seeds), ind_rate, per_seed, digest)


def _seed_job(args) -> dict[str, dict[str, float]]:
    return run_seed(*args).accuracy
