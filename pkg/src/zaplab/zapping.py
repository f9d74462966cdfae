"""Targeted resetting of final-layer connections ("zapping").

A zap resamples the classifier weight row(s) for one or more classes from the
initial weight distribution (Kaiming-Normal) and zeroes the matching bias
entries, forcing the network to relearn the mapping from features to those
classes. Nothing outside the targeted rows is touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import kaiming_normal

MODES = ("off", "per_episode_class", "iid_cadence")


@dataclass
class ZapPolicy:
    """When and how much to reset.

    ``per_episode_class`` resets exactly the class of the current episode;
    ``iid_cadence`` resets ``k_classes`` uniformly chosen distinct classes
    every ``cadence_epochs`` epochs. ``k_classes`` may be an int count, a
    float fraction of the head, or "all".
    """

    mode: str = "off"
    k_classes: object = "all"
    cadence_epochs: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"zap mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "iid_cadence" and self.cadence_epochs < 1:
            raise ValueError("cadence_epochs must be >= 1")

    def resolve_k(self, num_classes):
        k = self.k_classes
        if k == "all":
            return num_classes
        if isinstance(k, float):
            if not 0.0 < k <= 1.0:
                raise ValueError(f"fractional k_classes must be in (0, 1], got {k}")
            return max(1, round(k * num_classes))
        k = int(k)
        if k < 1:
            raise ValueError(f"k_classes must be >= 1, got {k}")
        if k > num_classes:
            raise ValueError(f"k_classes {k} exceeds head size {num_classes}")
        return k


def zap_class(model, class_index, rng):
    """Resample one class's fc weight row; zero its bias entry.

    Every other parameter value in the model is left bit-identical.
    """
    w = model.params["fc.weight"]
    b = model.params["fc.bias"]
    n_classes, fan_in = w.data.shape
    if not 0 <= class_index < n_classes:
        raise IndexError(f"class index {class_index} out of range [0, {n_classes})")
    w.data[class_index] = kaiming_normal(rng, (fan_in,), fan_in=fan_in, dtype=w.data.dtype)
    b.data[class_index] = 0.0


def zap_iid(model, policy, epoch_index, rng):
    """Cadence-driven reset for i.i.d. training; returns the zapped class set.

    Fires iff ``epoch_index % cadence_epochs == 0`` (so epoch 0 always fires);
    otherwise returns an empty set. Classes are drawn uniformly without
    replacement.
    """
    if policy.mode != "iid_cadence":
        raise ValueError(f"zap_iid requires iid_cadence mode, got {policy.mode!r}")
    if epoch_index % policy.cadence_epochs != 0:
        return set()
    n_classes = model.num_classes
    k = policy.resolve_k(n_classes)
    chosen = sorted(rng.choice(n_classes, size=k, replace=False).tolist())
    for c in chosen:
        zap_class(model, c, rng)
    return set(chosen)
