"""Shared argument parsing and output helpers for the experiment scripts."""
from __future__ import annotations

import argparse
import csv
import json
import logging
from pathlib import Path

import numpy as np

from hg2m.cli import parse_seeds
from hg2m.synthgen import PRESETS, SCALES, build, preset_spec


def parser(description: str, preset: str = "mixed") -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--preset", choices=sorted(PRESETS), default=preset)
    ap.add_argument("--scale", choices=sorted(SCALES), default="medium")
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--seeds", default="0-4")
    ap.add_argument("--out", type=Path, required=True)
    return ap


def setup(args):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    return build(preset_spec(args.preset, args.scale, args.data_seed)), parse_seeds(args.seeds)


def write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    logging.info("wrote %s", path)


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
