"""Convolutional classifier with a conv/fc parameter partition.

The network is a stack of identical blocks (3x3 conv -> instance norm -> ReLU
-> 2x2 max pool) followed by a single fully connected layer. Every parameter
carries exactly one partition label: ``conv`` for the feature extractor,
``fc`` for the final classifier; resetting operations touch only ``fc``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple  # (channels, height, width)
    num_blocks: int
    num_classes: int
    channels: int = 256
    final_pool: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_blocks not in (3, 4):
            raise ValueError(f"num_blocks must be 3 or 4, got {self.num_blocks}")
        if self.channels < 1 or self.num_classes < 1:
            raise ValueError("channels and num_classes must be positive")
        self.feature_hw()  # raises on spatial collapse

    def feature_hw(self):
        """Spatial size after all blocks; errors if pooling collapses it."""
        _, h, w = self.input_shape
        for b in range(self.num_blocks):
            pooled = b < self.num_blocks - 1 or self.final_pool
            if pooled:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(f"spatial size collapses below 1x1 at block {b + 1}")
        return h, w

    @property
    def feature_dim(self):
        h, w = self.feature_hw()
        return self.channels * h * w


_PRESETS = {
    # 28x28 single channel: three blocks, no pool after the last block
    "omniglot": dict(input_shape=(1, 28, 28), num_blocks=3, final_pool=False, channels=256),
    "synth": dict(input_shape=(1, 28, 28), num_blocks=3, final_pool=False, channels=16),
    # 84x84 RGB: four blocks, all pooled
    "mini-imagenet": dict(input_shape=(3, 84, 84), num_blocks=4, final_pool=True, channels=256),
}


def arch_preset(name, num_classes, channels=None):
    if name not in _PRESETS:
        raise ValueError(f"unknown architecture preset {name!r}; known: {sorted(_PRESETS)}")
    kw = dict(_PRESETS[name])
    if channels is not None:
        kw["channels"] = channels
    return ArchitectureSpec(num_classes=num_classes, **kw)


def kaiming_normal(rng, shape, fan_in, dtype=np.float64):
    """Zero-mean normal with std sqrt(2/fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ConvNet:
    """Parameter container plus the forward graph builder.

    ``params`` maps names to leaf tensors in a fixed order; ``labels`` maps
    each name to its partition (conv|fc). ``forward`` optionally takes a
    parameter override dict, which is how unrolled inner-loop steps run the
    network at weights that are graph nodes rather than leaves.
    """

    def __init__(self, spec, params, labels):
        self.spec = spec
        self.params = params
        self.labels = labels

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    def param_list(self):
        return list(self.params.values())

    def param_names(self):
        return list(self.params.keys())

    def conv_param_names(self):
        return [n for n, lab in self.labels.items() if lab == "conv"]

    def fc_param_names(self):
        return [n for n, lab in self.labels.items() if lab == "fc"]

    def _as_input(self, batch):
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise ValueError(
                f"batch shape {tuple(x.shape)} does not match input shape {self.spec.input_shape}"
            )
        return x

    def forward_features(self, batch, params=None):
        """Run the conv blocks and flatten: (N,C,H,W) -> (N, feature_dim)."""
        p = self.params if params is None else params
        x = self._as_input(batch)
        for b in range(1, self.spec.num_blocks + 1):
            x = ad.conv2d(x, p[f"conv{b}.weight"])
            x = ad.instance_norm(x)
            x = ad.relu(x)
            if b < self.spec.num_blocks or self.spec.final_pool:
                x = ad.maxpool2d(x)
        return ad.flatten(x)

    def forward(self, batch, params=None):
        """Class logits, differentiable w.r.t. all parameters."""
        p = self.params if params is None else params
        feats = self.forward_features(batch, params=p)
        return ad.linear(feats, p["fc.weight"], p["fc.bias"])


def build_convnet(spec, rng, dtype=np.float64):
    """Fresh network: Kaiming-Normal weights, zero biases, seeded draws.

    Two builds from generators in the same state produce bit-identical
    parameters.
    """
    params = {}
    labels = {}
    c_in = spec.input_shape[0]
    for b in range(1, spec.num_blocks + 1):
        name = f"conv{b}.weight"
        params[name] = Tensor(
            kaiming_normal(rng, (spec.channels, c_in, 3, 3), fan_in=c_in * 9, dtype=dtype),
            requires_grad=True,
        )
        labels[name] = "conv"
        c_in = spec.channels
    feat = spec.feature_dim
    params["fc.weight"] = Tensor(
        kaiming_normal(rng, (spec.num_classes, feat), fan_in=feat, dtype=dtype),
        requires_grad=True,
    )
    params["fc.bias"] = Tensor(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True)
    labels["fc.weight"] = "fc"
    labels["fc.bias"] = "fc"
    return ConvNet(spec, params, labels)


def clone_params(model):
    """Value snapshot, independent of later updates to the model."""
    return {name: p.data.copy() for name, p in model.params.items()}


def load_params(model, snapshot):
    """Copy a snapshot back into the model's parameter tensors."""
    missing = set(model.params) - set(snapshot)
    if missing:
        raise ValueError(f"snapshot missing parameters: {sorted(missing)}")
    for name, p in model.params.items():
        arr = np.asarray(snapshot[name])
        if arr.shape != p.data.shape:
            raise ValueError(f"{name}: snapshot shape {arr.shape} != {p.data.shape}")
        p.data[...] = arr


def replace_head(model, num_classes, rng):
    """Copy of the model with a fresh, randomly initialized final layer.

    Conv parameters are value-copied so the source model stays untouched; the
    new head is Kaiming-Normal with zero bias, sized for ``num_classes``.
    """
    spec = ArchitectureSpec(
        input_shape=model.spec.input_shape,
        num_blocks=model.spec.num_blocks,
        num_classes=num_classes,
        channels=model.spec.channels,
        final_pool=model.spec.final_pool,
    )
    dtype = model.dtype
    params = {}
    for name in model.conv_param_names():
        params[name] = Tensor(model.params[name].data.copy(), requires_grad=True)
    feat = spec.feature_dim
    params["fc.weight"] = Tensor(
        kaiming_normal(rng, (num_classes, feat), fan_in=feat, dtype=dtype), requires_grad=True
    )
    params["fc.bias"] = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)
    labels = dict(model.labels)
    return ConvNet(spec, params, labels)


def save_checkpoint(model, path, meta=None):
    """Self-describing parameter container: arrays + architecture + metadata."""
    header = {
        "spec": asdict(model.spec),
        "labels": model.labels,
        "dtype": str(model.dtype),
        "meta": meta or {},
    }
    arrays = {name: p.data for name, p in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Rebuild (model, meta) from a checkpoint file; round trip is exact."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        spec_kw = header["spec"]
        spec_kw["input_shape"] = tuple(spec_kw["input_shape"])
        spec = ArchitectureSpec(**spec_kw)
        dtype = np.dtype(header["dtype"])
        params = {}
        for name in header["labels"]:
            params[name] = Tensor(z[name].astype(dtype, copy=True), requires_grad=True)
    model = ConvNet(spec, params, dict(header["labels"]))
    return model, header["meta"]
