"""Run configuration: one strict JSON document covering model and training.

Unknown keys are rejected (typos must not silently fall back to defaults);
missing keys take the documented defaults. The resolved config is echoed
into every checkpoint and report.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ContractError

CONFIG_VERSION = 1

VARIANTS = ("proposed", "base-g", "base-l", "base-fs")


@dataclass
class ModelConfig:
    d_spec: int = 32
    frame_shift_ms: float = 12.5
    vocab: int = 17  # 16 synthetic symbols + pad
    d_p: int = 64
    conv_channels: list = field(default_factory=lambda: [32, 32, 64, 64, 128, 128])
    strides: list = field(default_factory=lambda: [2, 1, 2, 1, 2, 2])
    gru_hidden: int = 128
    d_g: int = 128
    d_l: int = 6
    d_a: int = 8  # shared attention width; 8 forms alignments faster than 16 here
    reduction_r: int = 3
    dec_hidden: int = 128
    prenet: list = field(default_factory=lambda: [64, 32])
    attn_width: int = 64
    n_emotions: int = 7
    cls_hidden: int = 64
    max_decoder_steps: int = 200

    def validate(self):
        if self.d_l % 2 != 0:
            raise ContractError(f"d_l must be even to split into key/value halves, got {self.d_l}")
        if len(self.conv_channels) != 6 or len(self.strides) != 6:
            raise ContractError("conv_channels and strides must each list 6 layers")
        if self.d_p % 2 != 0:
            raise ContractError(f"d_p must be even for the bidirectional text encoder, got {self.d_p}")
        if self.reduction_r < 1:
            raise ContractError("reduction_r must be >= 1")
        if len(self.prenet) != 2:
            raise ContractError("prenet must list two widths")
        return self


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    batch_size: int = 8
    lr: float = 2e-2  # calibrated on the pinned pilot run; 1e-3 underfits badly
    momentum: float = 0.9
    lambda_cls: float = 1.0
    stop_weight: float = 5.0
    grad_clip: float = 1.0
    seed: int = 0

    def validate(self):
        for f in fields(self):
            if f.name == "seed":
                continue
            if getattr(self, f.name) <= 0:
                raise ContractError(f"train config field {f.name} must be positive")
        return self


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ContractError(f"unsupported config version {self.version}")
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ContractError("config document must be a JSON object")
        _reject_unknown(doc, {"version", "model", "train"}, "top level")
        model = _load_section(ModelConfig, doc.get("model", {}), "model")
        train = _load_section(TrainConfig, doc.get("train", {}), "train")
        return cls(version=doc.get("version", CONFIG_VERSION), model=model, train=train).validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _reject_unknown(doc, allowed, where):
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ContractError(f"unknown config keys in {where}: {sorted(unknown)}")


def _load_section(klass, doc, where):
    names = {f.name for f in fields(klass)}
    _reject_unknown(doc, names, where)
    return klass(**doc)
