"""Structured configuration.

Configs layer as ``defaults < file < flags``.  Every section is a plain
dataclass; :func:`to_dict` / :func:`from_dict` round-trip through YAML.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

LAMBDA_DEFAULTS = (1.0, 1.0, 0.5, 1.0, 0.1, 0.5, 5.0, 10.0)
LOSS_NAMES = (
    "L_GAN_img",
    "L1_img",
    "LP_img",
    "L_GAN_obj",
    "L_AC_obj",
    "L_GAN_phr",
    "L_DAMSM_phr",
    "L_box",
)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    data_dir: str = "data"
    min_objects: int = 3
    max_objects: int = 8
    min_area_frac: float = 0.02
    max_caption_len: int = 20
    resolutions: tuple = (64, 128, 256)
    split_ratio: tuple = (0.8, 0.1, 0.1)
    val_size: int = 1024
    test_size: int = 2048
    glove_path: str = ""
    embed_dim: int = 50


@dataclass
class GammaConfig:
    gamma1: float = 5.0
    gamma2: float = 5.0
    gamma3: float = 10.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")


@dataclass
class ModelConfig:
    d_w: int = 256
    d_p: int = 128
    word_dim: int = 50
    noise_dim: int = 50
    ire_hidden: int = 300
    gconv_hidden: int = 512
    gconv_layers: int = 3
    head_hidden: int = 768
    box_hidden: int = 512
    min_box_extent: float = 1.0 / 32
    lig_channels: int = 64
    fused_channels: int = 256
    hidden_channels: int = 64
    crm_channels: tuple = (1024, 512, 256, 128, 64)
    base_resolution: int = 64
    n_stages: int = 3
    layout_merge: str = "max"
    lig_all_stages: bool = False
    box_source: str = "predicted"
    backbone: str = "stub"
    inception_weights: str = ""
    vgg_weights: str = ""
    d_width: int = 64
    phrase_d_width: int = 512
    phrase_d_resolution: int = 256
    te_dropout: float = 0.5


@dataclass
class TrainConfig:
    lr: float = 5e-4
    betas: tuple = (0.5, 0.999)
    batch_size: int = 32
    iterations: int = 200_000
    lambdas: tuple = LAMBDA_DEFAULTS
    seed: int = 0
    pretrain_text_steps: int = 2000
    pretrain_damsm_steps: int = 2000
    pretrain_lr: float = 2e-4
    checkpoint_every: int = 5000
    log_every: int = 100
    max_phrases_per_image: int = 0
    use_patch_d: bool = True
    use_ig_patch_d: bool = True
    use_caption_patch_d: bool = False
    use_obj_d: bool = True
    use_phrase_d: bool = True
    use_damsm_loss: bool = True
    phrase_d_on_upsampled: bool = False
    device: str = "cpu"
    threads: int = 0

    def __post_init__(self):
        if len(self.lambdas) != 8:
            raise ConfigError("lambdas must have exactly 8 entries")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    gamma: GammaConfig = field(default_factory=GammaConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def desk_config(**overrides) -> Config:
    """Narrow widths, 64-res only, CPU-sized.  Contracts on D_p/D_w hold."""
    cfg = Config()
    cfg.data.resolutions = (64,)
    cfg.model.n_stages = 1
    cfg.model.lig_channels = 16
    cfg.model.fused_channels = 64
    cfg.model.hidden_channels = 32
    cfg.model.crm_channels = (128, 96, 64, 48, 32)
    cfg.model.gconv_hidden = 256
    cfg.model.head_hidden = 256
    cfg.model.box_hidden = 256
    cfg.model.d_width = 32
    cfg.model.phrase_d_width = 128
    cfg.model.phrase_d_resolution = 64
    cfg.train.batch_size = 8
    cfg.train.iterations = 500
    cfg.train.pretrain_text_steps = 200
    cfg.train.pretrain_damsm_steps = 300
    cfg.train.checkpoint_every = 100
    cfg.train.log_every = 10
    cfg.train.max_phrases_per_image = 2
    cfg.train.phrase_d_on_upsampled = True
    return apply_overrides(cfg, overrides) if overrides else cfg


def to_dict(cfg: Config) -> dict:
    return _plain(dataclasses.asdict(cfg))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def from_dict(d: dict) -> Config:
    cfg = Config()
    return apply_overrides(cfg, d)


def apply_overrides(cfg: Config, overrides: dict) -> Config:
    """Apply a nested ``{section: {key: value}}`` or dotted ``{"sec.key": v}`` mapping."""
    sections = {}
    for key, value in overrides.items():
        if "." in key:
            sec, name = key.split(".", 1)
            sections.setdefault(sec, {})[name] = value
        elif isinstance(value, dict):
            sections.setdefault(key, {}).update(value)
        else:
            raise ConfigError(f"top-level config key {key!r} is not a section")
    for sec, values in sections.items():
        if not hasattr(cfg, sec):
            raise ConfigError(f"unknown config section {sec!r}")
        current = getattr(cfg, sec)
        known = {f.name: f for f in dataclasses.fields(current)}
        kwargs = dataclasses.asdict(current)
        for name, value in values.items():
            if name not in known:
                raise ConfigError(f"unknown config key {sec}.{name}")
            if isinstance(kwargs[name], tuple) and isinstance(value, (list, tuple)):
                value = tuple(value)
            kwargs[name] = value
        setattr(cfg, sec, type(current)(**kwargs))
    return cfg


def load_config(path: str | Path | None = None, overrides: dict | None = None, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    if path:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if raw.get("preset") == "desk":
            cfg = desk_config()
        raw.pop("preset", None)
        cfg = apply_overrides(cfg, raw)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg: Config | dict[str, Any]) -> str:
    d = to_dict(cfg) if isinstance(cfg, Config) else cfg
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
