"""Run configuration: one YAML file of nested key/value sections.

Every key is optional; missing keys take the defaults below. Schema::

    data:
      corpus: path to a corpus directory (holds manifest.tsv)
      size: image side in pixels (power of two)
    model:
      widths: [64, 128, 128]     # feature widths per resolution, last = bottleneck
      time_dim, text_dim, vision_dim, attn_dim, score_hidden, groups, patch, max_len
      score_axis: class | spatial
      vision_source: masked | original
    schedule:
      T: 1000
      beta_min: 1.0e-4
      beta_max: 2.0e-2
      kind: linear | cosine
      rho: sqrt_one_minus_alpha_bar | one
    train:
      steps, batch_size, lr, drop_prob, seed, grad_clip, log_every, checkpoint_every
      out: checkpoint path written at the end
    sample:
      steps: 50
      guidance_scale: 7.5
      seed: 0
    guidance:
      lam, window, stats, sign, t_min, t_max, enabled
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ParameterError


@dataclass
class DataConfig:
    corpus: str = "corpus"
    size: int = 32


@dataclass
class ModelConfig:
    widths: tuple = (64, 128, 128)
    time_dim: int = 128
    text_dim: int = 64
    vision_dim: int = 64
    attn_dim: int = 64
    score_hidden: int = 64
    groups: int = 8
    patch: int = 8
    max_len: int = 16
    score_axis: str = "class"
    vision_source: str = "masked"


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    kind: str = "linear"
    rho: str = "sqrt_one_minus_alpha_bar"


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    drop_prob: float = 0.05
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 100
    checkpoint_every: int = 0          # 0 = only the final checkpoint
    out: str = "checkpoints/model.ckpt"

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ParameterError(f"train.drop_prob must be in [0, 1], got {self.drop_prob}")
        if self.steps < 1 or self.batch_size < 1:
            raise ParameterError("train.steps and train.batch_size must be positive")


@dataclass
class SampleConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0


@dataclass
class GuidanceSection:
    enabled: bool = True
    lam: float = 1.0
    window: str = "centered"
    stats: str = "masked"
    sign: str = "descent"
    t_min: int = 0
    t_max: int | None = 300


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["widths"] = list(self.model.widths)
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


def _section(cls, values: dict | None, name: str):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ParameterError(f"unknown keys in [{name}]: {sorted(unknown)}")
    if "widths" in values:
        values["widths"] = tuple(values["widths"])
    return cls(**values)


def from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    sections = {f.name: f.type for f in fields(RunConfig)}
    unknown = set(d) - set(sections)
    if unknown:
        raise ParameterError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(
        data=_section(DataConfig, d.get("data"), "data"),
        model=_section(ModelConfig, d.get("model"), "model"),
        schedule=_section(ScheduleConfig, d.get("schedule"), "schedule"),
        train=_section(TrainConfig, d.get("train"), "train"),
        sample=_section(SampleConfig, d.get("sample"), "sample"),
        guidance=_section(GuidanceSection, d.get("guidance"), "guidance"),
    )


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    return from_dict(yaml.safe_load(text))
