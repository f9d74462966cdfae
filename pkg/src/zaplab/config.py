"""Experiment configuration: dataclasses, YAML loading, presets, hashing.

A config file is YAML; it may start from a named preset and override any
field. Every run embeds the resolved snapshot's hash in its outputs so
results are self-describing and non-comparable runs can be refused.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, fields, is_dataclass

import yaml

PRETRAIN_METHODS = ("iid", "asb", "meta_asb")
TRANSFER_MODES = ("sequential", "iid")
ZAP_SETTINGS = ("off", "episode", "iid")


@dataclass
class DataConfig:
    preset: str = "synth"  # synth | omniglot | mini-imagenet | imagefolder
    root: str = ""  # directory for image-folder datasets
    ingest: str = ""  # 28x28-gray | 84x84-rgb (directory loads)
    n_classes: int = 70  # synthetic only
    n_per_class: int = 20
    image_size: int = 28
    seed: int = 0
    train_per_class: int = 0  # 0 = preset default


@dataclass
class SplitConfig:
    n_pretrain: int = 50
    n_transfer: int = 20
    seed: int = 0


@dataclass
class PretrainConfig:
    method: str = "asb"
    eta_in: float = 0.01  # inner-loop SGD learning rate
    eta_out: float = 0.001  # outer/batch Adam learning rate
    k_inner: int = 10  # sequential examples per episode
    r_remember: int = 32  # remember-set size
    outer_steps: int = 2000  # episodes (asb / meta_asb)
    epochs: int = 20  # iid
    batch_size: int = 32  # iid
    zap: str = "off"  # off | episode | iid
    zap_k: object = "all"  # count, fraction, or "all" (iid cadence)
    zap_every_epochs: int = 1
    zap_resets_adam: bool = True
    eval_every: int = 250  # asb cadence in episodes; iid always evaluates per epoch


@dataclass
class TransferConfig:
    mode: str = "sequential"
    beta: float = 0.01  # per-image SGD learning rate (sequential)
    adam_lr: float = 0.001  # fine-tuning Adam learning rate (iid)
    freeze: bool = True  # sequential: update only the final layer
    epochs: int = 5  # iid fine-tuning epochs
    batch_size: int = 32
    train_per_class: int = 0  # few-shot cap; 0 = whole train partition
    eval_every_classes: int = 5  # sequential cadence
    eval_every_batches: int = 1  # iid cadence; 0 = per epoch


@dataclass
class ExperimentConfig:
    arch: str = "synth"  # architecture preset name
    channels: int = 0  # 0 = preset default
    dtype: str = "float32"
    pretrain_seed: int = 0
    transfer_seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)

    def validate(self):
        if self.pretrain.method not in PRETRAIN_METHODS:
            raise ValueError(f"pretrain.method: unknown method {self.pretrain.method!r}")
        if self.transfer.mode not in TRANSFER_MODES:
            raise ValueError(f"transfer.mode: unknown mode {self.transfer.mode!r}")
        if self.pretrain.zap not in ZAP_SETTINGS:
            raise ValueError(f"pretrain.zap: unknown setting {self.pretrain.zap!r}")
        if self.pretrain.method in ("asb", "meta_asb") and self.pretrain.zap == "iid":
            raise ValueError("pretrain.zap: 'iid' cadence only applies to i.i.d. pre-training")
        if self.pretrain.method == "iid" and self.pretrain.zap == "episode":
            raise ValueError("pretrain.zap: 'episode' only applies to asb/meta_asb")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype: must be float32 or float64, got {self.dtype!r}")
        return self

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESET_CONFIGS = {
    # desk-scale synthetic setup
    "synth": {},
    # full-scale setups; reference only, not expected to run on a desk machine
    "omniglot": {
        "arch": "omniglot",
        "data": {"preset": "omniglot", "n_classes": 1600, "n_per_class": 20, "train_per_class": 15},
        "split": {"n_pretrain": 1000, "n_transfer": 600},
        "pretrain": {"k_inner": 20, "r_remember": 64, "outer_steps": 9000, "epochs": 30,
                     "batch_size": 256, "eta_out": 0.001, "eval_every": 1000},
        "transfer": {"eval_every_classes": 50},
    },
    "mini-imagenet": {
        "arch": "mini-imagenet",
        "data": {"preset": "mini-imagenet", "n_classes": 100, "n_per_class": 600, "train_per_class": 500},
        "split": {"n_pretrain": 64, "n_transfer": 20},
        "pretrain": {"k_inner": 20, "r_remember": 100, "outer_steps": 9000, "epochs": 30,
                     "batch_size": 256, "eta_out": 0.001, "eval_every": 1000},
        "transfer": {"train_per_class": 30, "eval_every_classes": 1},
    },
}


def _merge(base, override, path):
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ValueError(f"unknown config field {'.'.join(path + [key])!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, path + [key])
        else:
            out[key] = val
    return out


def _build(cls, d):
    kwargs = {}
    for f in fields(cls):
        v = d[f.name]
        if is_dataclass(f.type) or f.name in ("data", "split", "pretrain", "transfer"):
            sub = {"data": DataConfig, "split": SplitConfig,
                   "pretrain": PretrainConfig, "transfer": TransferConfig}[f.name]
            kwargs[f.name] = sub(**v)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


def config_from_dict(d):
    """Resolve a raw dict (optionally starting from a preset) to a config.

    Unknown fields raise with their dotted path.
    """
    d = dict(d or {})
    preset = d.pop("preset", "synth")
    if preset not in PRESET_CONFIGS:
        raise ValueError(f"preset: unknown preset {preset!r}; known: {sorted(PRESET_CONFIGS)}")
    base = asdict(ExperimentConfig())
    base = _merge(base, PRESET_CONFIGS[preset], [])
    merged = _merge(base, d, [])
    return _build(ExperimentConfig, merged).validate()


def load_config(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return config_from_dict(raw)
