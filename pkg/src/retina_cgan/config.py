"""Experiment configuration: one TOML file with a section per subsystem."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dataset import DatasetConfig, LesionType
from .errors import ConfigError
from .evaluation import EvalConfig
from .losses import LossConfig
from .models import DiscriminatorConfig, GeneratorConfig, patch_size_for
from .preprocess import PreprocessConfig
from .training import TrainConfig

MODEL_NAMES = ("hednet_cgan", "hednet", "unet")


@dataclass
class ModelConfig:
    name: str = "hednet_cgan"
    base_width: int = 64
    backbone_stages: int = 5
    pretrained_backbone: bool = False
    pretrained_path: str = ""
    fusion_init: float = 0.2
    patch_size: int = 0  # 0: 64 for MA, 128 otherwise
    disc_base_width: int = 64

    def validate(self):
        if self.name not in MODEL_NAMES:
            raise ConfigError(f"model.name: expected one of {MODEL_NAMES}, got {self.name!r}")
        if self.patch_size not in (0, 64, 128):
            raise ConfigError("model.patch_size: expected 0 (by lesion), 64 or 128")
        if self.disc_base_width < 1:
            raise ConfigError("model.disc_base_width: must be >= 1")
        self.generator_config().validate()
        return self

    def generator_config(self):
        return GeneratorConfig(
            backbone_stages=self.backbone_stages,
            pretrained_backbone=self.pretrained_backbone,
            pretrained_path=self.pretrained_path or None,
            fusion_init=self.fusion_init,
            base_width=self.base_width,
        )

    def discriminator_config(self, lesion):
        return DiscriminatorConfig(
            patch_size=self.patch_size or patch_size_for(lesion),
            base_width=self.disc_base_width,
        )


@dataclass
class ExperimentConfig:
    lesion: str = "EX"
    seed: int = 0
    run_name: str = "default"
    runs_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.lesion = LesionType.parse(self.lesion).value
        if not self.run_name:
            raise ConfigError("run_name: must be non-empty")
        for section in ("dataset", "preprocess", "model", "loss", "eval"):
            getattr(self, section).validate()
        self.train.loss = self.loss
        self.train.seed = self.seed
        self.train.validate()
        return self

    @property
    def lesion_type(self):
        return LesionType.parse(self.lesion)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["train"].pop("loss")
        d["train"].pop("seed")
        return _plain(d)

    def model_digest(self):
        """Hash of what a checkpoint must agree with at inference time.

        The architecture travels inside the checkpoint, so only the lesion and
        the preprocessing chain are covered; this lets one config evaluate
        unet, hednet and hednet_cgan checkpoints side by side.
        """
        d = self.to_dict()
        payload = {"lesion": d["lesion"], "preprocess": d["preprocess"]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(section, key, value, hint):
    name = f"{section}.{key}" if section else key
    origin = typing.get_origin(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{name}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(section, key, v, a) for v, a in zip(value, args))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: expected a table, got {value!r}")
        return {str(k): _coerce(section, f"{key}.{k}", v, typing.get_args(hint)[1]) for k, v in value.items()}
    return value


def _build(cls, section, values, skip=()):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected a table")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown key")
    kwargs = {k: _coerce(section, k, v, hints[k]) for k, v in values.items()}
    return cls(**kwargs)


SECTIONS = {
    "dataset": DatasetConfig,
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def config_from_dict(data) -> ExperimentConfig:
    top = {k: v for k, v in data.items() if k not in SECTIONS}
    cfg = _build(ExperimentConfig, "", top, skip=SECTIONS)
    for name, cls in SECTIONS.items():
        skip = ("loss", "seed") if name == "train" else ()
        setattr(cfg, name, _build(cls, name, data.get(name, {}), skip=skip))
    return cfg.validate()


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path=None):
    text = tomli_w.dumps(cfg.to_dict())
    if path is not None:
        Path(path).write_text(text)
    return text
