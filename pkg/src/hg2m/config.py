"""Run configuration with validation and a provenance digest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .distill import DEFAULT_PAIR_REG, StudentConfig
from .evalproto import MAX_IND_RATE, MLP_WEIGHT_DECAY, PipelineConfig
from .teacher import TeacherConfig

MODES = ("mlp", "teacher", "hg2m", "hg2m+")


class ConfigError(ValueError):
    """Invalid configuration or input; maps to exit code 2."""


@dataclass
class RunConfig:
    data: str = ""
    mode: str = "hg2m+"
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    lam: float = 0.0
    p: float = 0.9
    metapaths: list[list[str]] | None = None
    pair_reg: float = DEFAULT_PAIR_REG
    log_path_count: bool = False
    ind_rate: float = 0.0
    noise_alpha: float | None = None
    mlp_weight_decay: float = MLP_WEIGHT_DECAY
    teacher_ckpt: str | None = None

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lambda must lie in [0, 1]")
        if not 0 < self.p <= 1:
            raise ConfigError("p must lie in (0, 1]")
        if not 0 <= self.ind_rate <= MAX_IND_RATE:
            raise ConfigError(f"ind_rate must lie in [0, {MAX_IND_RATE}]")
        if self.noise_alpha is not None and not 0 <= self.noise_alpha <= 1:
            raise ConfigError("noise alpha must lie in [0, 1]")
        if self.pair_reg < 0:
            raise ConfigError("pair_reg must be nonnegative")
        for c in (self.teacher, self.student):
            if c.hidden < 1 or c.num_layers < 1 or c.epochs < 0 or not 0 <= c.dropout < 1 or c.lr <= 0:
                raise ConfigError(f"invalid network hyperparameters: {c}")
        if len(self.teacher.fanout) != self.teacher.num_layers:
            raise ConfigError("fanout list length must equal the teacher layer count")
        if self.data and not Path(self.data).is_dir():
            raise ConfigError(f"dataset directory not found: {self.data}")
        return self

    def digest(self) -> str:
        """sha256 prefix of the canonical JSON of every field except ``out``."""
        d = asdict(self)
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.teacher, self.student, self.mlp_weight_decay, self.p, self.metapaths,
                              self.pair_reg, self.log_path_count, self.noise_alpha)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "teacher" in d:
                t = dict(d["teacher"])
                if "fanout" in t:
                    t["fanout"] = tuple(t["fanout"])
                d["teacher"] = TeacherConfig(**t)
            if "student" in d:
                d["student"] = StudentConfig(**d["student"])
        except TypeError as e:
            raise ConfigError(str(e)) from None
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
