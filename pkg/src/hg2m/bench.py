"""Fetch counting and inference latency for tree-based HGNN inference vs MLP."""
from __future__ import annotations

import os
import platform
import resource
import sys
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .hetgraph import HeteroGraph
from .nnkernel import MLP
from .teacher import RSAGE, ComputeTree, edge_types, expand_tree, in_adjacency, sampled_inference

DEFAULT_NS = (20, 15, 10, 5)
MIN_BATCH_NS = 20_000  # calls faster than this are batched and divided


@dataclass
class FetchTrace:
    """Nodes fetched to answer ``targets``.

    ``layers[l]`` maps node type to the union (over targets) of nodes whose
    layer-``l`` state is needed; ``per_target`` counts unique fetched nodes of
    each target's own tree.
    """

    targets: np.ndarray
    layers: list[dict[int, np.ndarray]]
    per_target: np.ndarray
    total: int
    wall_ns: dict[str, float] = field(default_factory=dict)

    def fetched(self) -> set[tuple[int, int]]:
        return {(t, int(v)) for fr in self.layers for t, nodes in fr.items() for v in nodes}


def _union_layers(trees: list[ComputeTree]) -> list[dict[int, np.ndarray]]:
    L = len(trees[0].frontiers)
    out = []
    for l in range(L):
        acc: dict[int, list] = {}
        for tr in trees:
            for t, nodes in tr.frontiers[l].items():
                acc.setdefault(t, []).append(nodes)
        out.append({t: np.unique(np.concatenate(v)) for t, v in sorted(acc.items())})
    return out


def count_fetched(g: HeteroGraph, target_type: int, targets, num_layers: int,
                  fanout: list[int] | None = None, seed: int = 0) -> FetchTrace:
    """Exact reverse-BFS neighborhoods, or the seeded sampler's fetches when ``fanout`` is set.

    Sampling replays :func:`sampled_inference` exactly (per-target RNG).
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    targets = np.asarray(targets, dtype=np.int64)
    etypes = edge_types(g)
    in_adj = [in_adjacency(g, et) for et in etypes]
    trees = []
    for t in targets:
        rng = np.random.default_rng([seed, int(t)]) if fanout is not None else None
        trees.append(expand_tree(g, target_type, [t], num_layers, fanout, rng, etypes, in_adj))
    per = np.array([len(tr.fetched()) for tr in trees], dtype=np.int64)
    layers = _union_layers(trees)
    total = len({(t, int(v)) for fr in layers for t, nodes in fr.items() for v in nodes})
    return FetchTrace(targets, layers, per, total)


def mlp_trace(target_type: int, targets) -> FetchTrace:
    targets = np.asarray(targets, dtype=np.int64)
    uniq = np.unique(targets)
    return FetchTrace(targets, [{target_type: uniq}], np.ones(len(targets), dtype=np.int64), len(uniq))


def layers_vs_fetched(g: HeteroGraph, target_type: int, targets, max_layers: int = 4) -> list[tuple[int, int, int]]:
    """Rows ``(layers, hgnn_fetched, mlp_fetched)`` for plotting."""
    mlp = mlp_trace(target_type, targets).total
    return [(L, count_fetched(g, target_type, targets, L).total, mlp) for L in range(1, max_layers + 1)]


# ---------------------------------------------------------------- timing


@dataclass
class Timing:
    median_ns: float
    p95_ns: float
    batch: int
    samples: np.ndarray


def _calibrate(fn: Callable[[], object]) -> int:
    t0 = time.perf_counter_ns()
    fn()
    once = time.perf_counter_ns() - t0
    if once >= MIN_BATCH_NS:
        return 1
    return int(np.ceil(MIN_BATCH_NS / max(once, 1)))


def time_call(fn: Callable[[], object], repeats: int = 100, warmup: int = 10) -> Timing:
    """Median and p95 wall time of ``fn`` after ``warmup`` untimed calls.

    Calls shorter than ``MIN_BATCH_NS`` run in batches whose time is divided
    by the batch size.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    batch = _calibrate(fn)
    samples = np.empty(repeats, dtype=np.float64)
    for i in range(repeats):
        t0 = time.perf_counter_ns()
        for _ in range(batch):
            fn()
        samples[i] = (time.perf_counter_ns() - t0) / batch
    return Timing(float(np.median(samples)), float(np.percentile(samples, 95)), batch, samples)


@dataclass
class LatencyRow:
    model: str
    fanout: str
    median_ms: float
    p95_ms: float
    fetched_nodes: int
    speedup: float  # HGNN-full median / this median


@dataclass
class BenchReport:
    rows: list[LatencyRow]
    fingerprint: dict
    plot: list[tuple[int, int, int]] = field(default_factory=list)
    targets: np.ndarray | None = None

    def row(self, model: str) -> LatencyRow:
        return next(r for r in self.rows if r.model == model)

    def to_csv(self, digest: str = "") -> str:
        lines = [f"# config_digest={digest}"] if digest else []
        lines.append("model,fanout,median_ms,p95_ms,fetched_nodes,speedup")
        for r in self.rows:
            lines.append(f"{r.model},{r.fanout},{r.median_ms:.6f},{r.p95_ms:.6f},{r.fetched_nodes},{r.speedup:.3f}")
        return "\n".join(lines) + "\n"

    def plot_csv(self, digest: str = "") -> str:
        lines = [f"# config_digest={digest}"] if digest else []
        lines.append("layers,hgnn_fetched,mlp_fetched")
        lines += [f"{L},{h},{m}" for L, h, m in self.plot]
        return "\n".join(lines) + "\n"


def environment_fingerprint() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "blas": [{k: i.get(k) for k in ("internal_api", "version", "num_threads")} for i in threadpool_info()],
        "timer_resolution_ns": time.get_clock_info("perf_counter").resolution * 1e9,
        "max_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
    }


def time_inference(teacher: RSAGE, mlp: MLP, g: HeteroGraph, targets, ns: tuple[int, ...] = DEFAULT_NS,
                   repeats: int = 100, warmup: int = 10, seed: int = 0,
                   plot_layers: int = 0) -> BenchReport:
    """Latency of full-neighborhood HGNN, NS-n HGNN and MLP inference on ``targets``.

    Every timed region runs under a single BLAS thread.
    """
    targets = np.asarray(targets, dtype=np.int64)
    tt = teacher.target_type
    L = teacher.num_layers
    x = g.features[tt]
    paths: list[tuple[str, str, Callable, int]] = []
    full = count_fetched(g, tt, targets, L)
    paths.append(("HGNN", "full", lambda: sampled_inference(teacher, g, targets, None, seed), full.total))
    for n in ns:
        fo = [n] * L
        tr = count_fetched(g, tt, targets, L, fo, seed)
        paths.append((f"HGNN NS-{n}", str(n), lambda fo=fo: sampled_inference(teacher, g, targets, fo, seed), tr.total))
    paths.append(("MLP", "-", lambda: mlp.predict(x[targets]), mlp_trace(tt, targets).total))

    timings = {}
    with threadpool_limits(limits=1):
        for name, _, fn, _ in paths:
            timings[name] = time_call(fn, repeats, warmup)
    base = timings["HGNN"].median_ns
    rows = [LatencyRow(name, fo, timings[name].median_ns / 1e6, timings[name].p95_ns / 1e6, fetched,
                       base / timings[name].median_ns) for name, fo, _, fetched in paths]
    plot = layers_vs_fetched(g, tt, targets, plot_layers) if plot_layers else []
    return BenchReport(rows, environment_fingerprint(), plot, targets)


def pick_targets(n_nodes: int, count: int = 5, seed: int = 0) -> np.ndarray:
    return np.sort(np.random.default_rng(seed).choice(n_nodes, size=count, replace=False))
