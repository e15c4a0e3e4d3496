"""``hg2m`` command line: gen, train, distill, eval, bench, reproduce.

Exit codes: 0 ok, 1 compute failure, 2 configuration or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, evalproto, synthgen
from .config import MODES, ConfigError, RunConfig
from .distill import dump_pairs_tsv, dump_reliable_tsv
from .evalproto import (
    HG2M,
    HG2M_PLUS,
    MLP,
    STREAM_STUDENT,
    STREAM_TEACHER,
    TEACHER,
    Variant,
    prepare_distillation,
    prepare_seed,
    resolve_metapaths,
    rng_for,
    score_split,
    train_variant,
)
from .hetgraph import GraphFormatError, load_graph
from .metapath import MetaPathBudgetError
from .nnkernel import MLP as MLPNet
from .nnkernel import CheckpointError, load_checkpoint, save_checkpoint
from .teacher import RSAGE, GraphOps, train_teacher

log = logging.getLogger("hg2m")

VARIANT_FOR_MODE = {"mlp": MLP, "teacher": TEACHER, "hg2m": HG2M, "hg2m+": HG2M_PLUS}


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(evalproto._nan_to_none(obj), indent=2, sort_keys=True) + "\n")


def _with_digest(csv: str, digest: str) -> str:
    return f"# config_digest={digest}\n{csv}"


# ---------------------------------------------------------------- config from flags


def _add_run_flags(p: argparse.ArgumentParser, modes=MODES) -> None:
    p.add_argument("--config", help="JSON run config; explicit flags override it")
    p.add_argument("--data", help="graph directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=modes)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--p", type=float, help="reliable node proportion")
    p.add_argument("--epochs", type=int, help="epochs for teacher and student")
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--ind-rate", type=float)
    p.add_argument("--noise", type=float, help="feature noise level alpha")
    p.add_argument("--pair-reg", type=float, help="L2 strength of the pair classifier")
    p.add_argument("--log-path-count", action="store_true", help="log1p-scale the path-count pair feature")
    p.add_argument("--metapath", action="append", help="relation chain, e.g. M-A:fwd,M-A:rev (repeatable)")
    p.add_argument("--teacher", dest="teacher_ckpt", help="teacher checkpoint to reuse")


def build_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    direct = {"data": "data", "out": "out", "mode": "mode", "lam": "lam", "p": "p", "ind_rate": "ind_rate",
              "noise": "noise_alpha", "teacher_ckpt": "teacher_ckpt", "pair_reg": "pair_reg"}
    for flag, key in direct.items():
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "log_path_count", False):
        cfg.log_path_count = True
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "seeds", None):
        cfg.seeds = parse_seeds(args.seeds)
    if getattr(args, "metapath", None):
        cfg.metapaths = [m.split(",") for m in args.metapath]
    net = {k: getattr(args, a, None) for k, a in
           (("epochs", "epochs"), ("hidden", "hidden"), ("num_layers", "layers"), ("dropout", "dropout"), ("lr", "lr"))}
    net = {k: v for k, v in net.items() if v is not None}
    if net:
        cfg.student = replace(cfg.student, **net)
        tnet = dict(net)
        if "num_layers" in tnet and tnet["num_layers"] != len(cfg.teacher.fanout):
            tnet["fanout"] = tuple((list(cfg.teacher.fanout) + [cfg.teacher.fanout[-1]] * 8)[:tnet["num_layers"]])
        cfg.teacher = replace(cfg.teacher, **tnet)
    if not cfg.data:
        raise ConfigError("--data is required")
    return cfg.validate()


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-4"``."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part.strip()[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            elif part.strip():
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seed list {text!r}") from None
    return out


def _load(cfg: RunConfig):
    try:
        return load_graph(cfg.data)
    except FileNotFoundError as e:
        raise ConfigError(f"missing file: {e.filename or e}") from None


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    spec = synthgen.preset_spec(args.preset, args.scale, args.seed)
    out = synthgen.generate(spec, args.out)
    print(out)
    return 0


def _teacher_for(cfg: RunConfig, g_train, target, split, seed: int, out: Path | None):
    """Load ``cfg.teacher_ckpt`` or train a fresh teacher; returns (model, ops on the train-time graph)."""
    ops = GraphOps(g_train)
    if cfg.teacher_ckpt:
        try:
            params, meta = load_checkpoint(cfg.teacher_ckpt)
        except FileNotFoundError:
            raise ConfigError(f"teacher checkpoint not found: {cfg.teacher_ckpt}") from None
        if meta.get("seed") != seed or meta.get("ind_rate") != cfg.ind_rate:
            raise ConfigError("teacher checkpoint was trained with a different seed or inductive rate")
        try:
            return RSAGE.from_params(g_train, params, meta), ops
        except ValueError as e:
            raise ConfigError(f"{cfg.teacher_ckpt}: {e}") from None
    model, tlog = train_teacher(g_train, target, split, cfg.teacher, rng_for(seed, STREAM_TEACHER), ops)
    if out is not None:
        _write(out / "teacher_log.csv", _with_digest(tlog.to_csv(), cfg.digest()))
    return model, ops


def run_train(cfg: RunConfig, dump_artifacts: bool = False) -> dict:
    """Train the configured mode for ``cfg.seeds[0]`` and write checkpoint, log and metrics."""
    seed = cfg.seeds[0]
    out = Path(cfg.out)
    digest = cfg.digest()
    g, target, split = _load(cfg)
    pcfg = cfg.pipeline()
    sd = prepare_seed(g, target, split, pcfg, seed, cfg.ind_rate)
    labels = target.labels
    metrics = {"config_digest": digest, "mode": cfg.mode, "seed": seed, "ind_rate": cfg.ind_rate}

    if cfg.mode == "teacher":
        model, _ = _teacher_for(replace(cfg, teacher_ckpt=None), sd.g_train, target, sd.split, seed, out)
        meta = {**model.meta(), "seed": seed, "ind_rate": cfg.ind_rate, "config_digest": digest}
        metrics["checkpoint_sha256"] = save_checkpoint(out / "teacher.ckpt", model.params, meta)
        ops_full = GraphOps(sd.g_full)
        metrics["accuracy"] = score_split(model.predict(ops_full).argmax(axis=1), labels, sd.split)
        _write_json(out / "metrics.json", metrics)
        return metrics

    v = replace(VARIANT_FOR_MODE[cfg.mode], lam=cfg.lam) if cfg.mode != "mlp" else MLP
    art = None
    if cfg.mode in ("hg2m", "hg2m+"):
        teacher, ops = _teacher_for(cfg, sd.g_train, target, sd.split, seed, out)
        paths = resolve_metapaths(sd.g_train, target, cfg.metapaths)
        art = prepare_distillation(sd.g_train, target, sd.split, teacher, ops, pcfg, cfg.p, paths)
        metrics["diagnostics"] = evalproto.distillation_diagnostics(art, target, sd.split)
        if dump_artifacts:
            head = f"config_digest={digest}"
            dump_reliable_tsv(out / "reliable.tsv", art.reliable, head)
            for name, m in art.pair_sets.items():
                dump_pairs_tsv(out / f"pairs_{name}.tsv", m, head)
    model, slog = train_variant(sd.x, target, sd.split, pcfg, seed, v, art)
    meta = {"model": "mlp", "mode": cfg.mode, "seed": seed, "config_digest": digest}
    metrics["checkpoint_sha256"] = save_checkpoint(out / "student.ckpt", model.params, meta)
    _write(out / "student_log.csv", _with_digest(slog.to_csv(), digest))
    metrics["accuracy"] = score_split(model.predict(sd.x).argmax(axis=1), labels, sd.split)
    metrics["best_val_acc"] = slog.best_val_acc
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_train(args) -> int:
    cfg = build_config(args)
    _write(Path(cfg.out) / "config.json", cfg.to_json())
    m = run_train(cfg)
    print(json.dumps(evalproto._nan_to_none(m["accuracy"]), sort_keys=True))
    return 0


def cmd_distill(args) -> int:
    cfg = build_config(args)
    if cfg.mode not in ("hg2m", "hg2m+"):
        raise ConfigError("distill runs in mode hg2m or hg2m+")
    _write(Path(cfg.out) / "config.json", cfg.to_json())
    m = run_train(cfg, dump_artifacts=True)
    print(json.dumps(evalproto._nan_to_none(m["accuracy"]), sort_keys=True))
    return 0


def _variants(names: str) -> list[Variant]:
    table = {"mlp": MLP, "teacher": TEACHER, "hg2m": HG2M, "hg2m+": HG2M_PLUS,
             "rnd": evalproto.HG2M_RND, "rmpd": evalproto.HG2M_RMPD}
    try:
        return [table[n.strip()] for n in names.split(",")]
    except KeyError as e:
        raise ConfigError(f"unknown model {e.args[0]!r}; choose from {sorted(table)}") from None


def cmd_eval(args) -> int:
    cfg = build_config(args)
    if args.ind_rate is None:
        cfg.ind_rate = 0.2
        cfg.validate()
    variants = [replace(v, lam=cfg.lam) if v.kind == "student" else v for v in _variants(args.models)]
    g, target, split = _load(cfg)
    report = evalproto.run_production_eval(g, target, split, cfg.pipeline(), cfg.seeds, cfg.ind_rate,
                                           variants, n_jobs=args.jobs)
    report.config_digest = cfg.digest()
    out = Path(cfg.out)
    _write(out / "config.json", cfg.to_json())
    _write(out / "report.json", report.to_json())
    _write(out / "report.csv", report.to_csv())
    print(format_summary(report))
    return 0


def format_summary(report: evalproto.EvalReport) -> str:
    lines = [f"{'model':<14}" + "".join(f"{s:>18}" for s in ("tran", "ind", "prod"))]
    for m in report.models:
        cells = []
        for s in ("tran", "ind", "prod"):
            mean, sd = report.mean(m, s), report.std(m, s)
            cells.append(f"{mean:.4f}" + (f" ± {sd:.4f}" if sd is not None else ""))
        lines.append(f"{m:<14}" + "".join(f"{c:>18}" for c in cells))
    return "\n".join(lines)


def cmd_bench(args) -> int:
    cfg = build_config(args)
    g, target, split = _load(cfg)
    seed = cfg.seeds[0]
    tt, k = target.target_type, target.num_classes
    if cfg.teacher_ckpt:
        params, meta = load_checkpoint(cfg.teacher_ckpt)
        teacher = RSAGE.from_params(g, params, meta)
    else:  # latency does not depend on trained weights
        teacher = RSAGE(g, tt, k, cfg.teacher.hidden, cfg.teacher.num_layers, cfg.teacher.dropout,
                        rng_for(seed, STREAM_TEACHER))
    if args.student:
        mlp = MLPNet.from_params(load_checkpoint(args.student)[0])
    else:
        mlp = MLPNet(g.features[tt].shape[1], cfg.student.hidden, k, cfg.student.num_layers, cfg.student.dropout,
                     rng_for(seed, STREAM_STUDENT))
    targets = bench.pick_targets(g.node_counts[tt], args.targets, seed)
    ns = tuple(int(n) for n in args.ns.split(",")) if args.ns else ()
    report = bench.time_inference(teacher, mlp, g, targets, ns, args.repeats, args.warmup, seed, args.plot_layers)
    out = Path(cfg.out)
    digest = cfg.digest()
    _write(out / "latency.csv", report.to_csv(digest))
    if report.plot:
        _write(out / "fetch_vs_layers.csv", report.plot_csv(digest))
    _write_json(out / "environment.json", {"config_digest": digest, "targets": targets.tolist(),
                                            "fingerprint": report.fingerprint})
    print(report.to_csv())
    return 0


TABLE_MODELS = (MLP, TEACHER, HG2M, HG2M_PLUS)


def reproduce_table(report: evalproto.EvalReport) -> str:
    """One row per setting: model accuracies (mean, std) and HG2M+ deltas vs MLP, teacher and HG2M."""
    names = [v.name for v in TABLE_MODELS]
    with_std = len(report.seeds) >= 2
    head = ["setting"]
    for n in names:
        head.append(n)
        if with_std:
            head.append(f"{n} std")
    head += ["delta_MLP", "delta_HGNN", "delta_HG2M"]
    lines = [f"# config_digest={report.config_digest}", ",".join(head)]
    for s in ("tran", "ind", "prod"):
        mean = {n: report.mean(n, s) for n in names}
        row = [s]
        for n in names:
            row.append(f"{mean[n]:.6f}")
            if with_std:
                row.append(f"{report.std(n, s):.6f}")
        best = mean[HG2M_PLUS.name]
        row += [f"{best - mean[MLP.name]:.6f}", f"{best - mean[TEACHER.name]:.6f}", f"{best - mean[HG2M.name]:.6f}"]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def cmd_reproduce(args) -> int:
    if args.preset not in synthgen.PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(synthgen.PRESETS)}")
    out = Path(args.out)
    data = out / "data"
    synthgen.generate(synthgen.preset_spec(args.preset, args.scale, args.data_seed), data)
    cfg = RunConfig(data=str(data), seeds=parse_seeds(args.seeds), out=str(out), ind_rate=args.ind_rate)
    if args.epochs is not None:
        cfg.teacher = replace(cfg.teacher, epochs=args.epochs)
        cfg.student = replace(cfg.student, epochs=args.epochs)
    cfg.validate()
    g, target, split = load_graph(data)
    report = evalproto.run_production_eval(g, target, split, cfg.pipeline(), cfg.seeds, cfg.ind_rate,
                                           TABLE_MODELS, n_jobs=args.jobs)
    report.config_digest = cfg.digest()
    _write(out / "config.json", cfg.to_json())
    _write(out / "report.json", report.to_json())
    _write(out / "report.csv", report.to_csv())
    table = reproduce_table(report)
    _write(out / "table.csv", table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hg2m", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic graph directory")
    p.add_argument("--preset", choices=sorted(synthgen.PRESETS), default="mixed")
    p.add_argument("--scale", choices=sorted(synthgen.SCALES), default="medium")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a teacher, MLP or distilled student")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="distill a student and dump reliable nodes and pairs")
    _add_run_flags(p, ("hg2m", "hg2m+"))
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="transductive / inductive / production evaluation over seeds")
    _add_run_flags(p)
    p.add_argument("--seeds", help="e.g. 0,1,2 or 0-4")
    p.add_argument("--models", default="mlp,teacher,hg2m,hg2m+")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="fetch counts and inference latency")
    _add_run_flags(p)
    p.add_argument("--student", help="student checkpoint (default: freshly initialized MLP)")
    p.add_argument("--targets", type=int, default=5)
    p.add_argument("--ns", default="20,15,10,5", help="NS-n fan-outs to time")
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--plot-layers", type=int, default=4)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("reproduce", help="generate a preset and emit the accuracy table")
    p.add_argument("--preset", default="mixed")
    p.add_argument("--scale", choices=sorted(synthgen.SCALES), default="medium")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seeds", default="0-4")
    p.add_argument("--ind-rate", type=float, default=0.2)
    p.add_argument("--epochs", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("HG2M_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (ConfigError, GraphFormatError, CheckpointError, FileNotFoundError, KeyError) as e:
        print(f"hg2m: error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, MetaPathBudgetError, ValueError, MemoryError) as e:
        print(f"hg2m: compute failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
