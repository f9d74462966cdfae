"""Datasets: class-per-folder ingestion, synthetic glyphs, splits, episodes.

A dataset is an ordered list of classes, each with an ordered list of images
and a fixed train/validation partition (the first ``n_train`` examples train,
the rest validate). Images are float32 in [0, 1], shaped (C, H, W).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .seeding import rng_stream

_INGEST_PRESETS = {
    "28x28-gray": dict(size=28, mode="L", default_train=15),
    "84x84-rgb": dict(size=84, mode="RGB", default_train=500),
}
_PRESET_ALIASES = {"omniglot": "28x28-gray", "mini-imagenet": "84x84-rgb"}


@dataclass
class ClassDataset:
    name: str
    class_names: list
    images: list  # per class: (n_i, C, H, W) float32 in [0, 1]
    n_train: list  # per class

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def image_shape(self):
        return tuple(self.images[0].shape[1:])

    def train_examples(self, c):
        return self.images[c][: self.n_train[c]]

    def val_examples(self, c):
        return self.images[c][self.n_train[c] :]

    def fingerprint(self):
        """Stable identity hash: refuses to pool results across datasets."""
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(repr(self.image_shape).encode())
        h.update(repr([len(im) for im in self.images]).encode())
        h.update(repr(self.n_train).encode())
        for im in self.images:
            h.update(im[0].tobytes())
        return h.hexdigest()[:16]


def load_imagefolder(root, preset, train_per_class=None):
    """Read a class-per-directory tree of PNG/JPEG images.

    Classes are the subdirectories of ``root`` in lexicographic order; files
    within a class are also taken lexicographically, so two loads of the same
    tree are identical. Images are resized to the preset geometry and scaled
    to [0, 1].
    """
    from PIL import Image

    preset = _PRESET_ALIASES.get(preset, preset)
    if preset not in _INGEST_PRESETS:
        raise ValueError(f"unknown ingestion preset {preset!r}; known: {sorted(_INGEST_PRESETS)}")
    cfg = _INGEST_PRESETS[preset]
    size, mode = cfg["size"], cfg["mode"]
    if train_per_class is None:
        train_per_class = cfg["default_train"]

    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")
    class_names, images, n_train = [], [], []
    for d in class_dirs:
        files = sorted(f for f in d.iterdir() if f.is_file())
        if not files:
            raise ValueError(f"empty class directory: {d}")
        arrs = []
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert(mode).resize((size, size), Image.BILINEAR)
                    a = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as e:
                raise ValueError(f"unreadable image file {f}: {e}") from e
            if mode == "L":
                a = a[None, :, :]
            else:
                a = a.transpose(2, 0, 1)
            arrs.append(a)
        stack = np.stack(arrs)
        class_names.append(d.name)
        images.append(stack)
        n_train.append(min(train_per_class, len(arrs) - 1) if len(arrs) > 1 else 1)
    return ClassDataset(name=f"imagefolder:{root.name}:{preset}", class_names=class_names, images=images, n_train=n_train)


def _bezier(p0, p1, p2, t):
    """Quadratic Bezier points, t in [0,1]: (1-t)^2 p0 + 2t(1-t) p1 + t^2 p2."""
    t = t[:, None]
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t**2 * p2


def synth_glyphs(n_classes, n_per_class, image_size=28, seed=0, train_per_class=None):
    """Procedural stroke-glyph dataset: many classes, few consistent examples.

    Each class is a fixed set of 3-5 Bezier strokes whose endpoints sit on a
    jittered 3x3 anchor lattice, so strokes are shared sub-parts across
    classes and confusability grows with the number of classes. Examples vary
    by a small random affine warp, stroke jitter, and pixel noise. Fully
    deterministic for a given seed. Defaults to a 3/4 train partition
    (e.g. 20 -> 15 train).
    """
    if n_per_class < 2:
        raise ValueError("n_per_class must be >= 2")
    if train_per_class is None:
        train_per_class = max(1, min(n_per_class - 1, round(0.75 * n_per_class)))
    hi = image_size * 2
    t = np.linspace(0.0, 1.0, 60)
    grid = np.array([[x, y] for y in (0.22, 0.5, 0.78) for x in (0.22, 0.5, 0.78)])
    images = []
    for c in range(n_classes):
        crng = rng_stream(seed, f"glyph-class-{c}")
        anchors = grid + crng.normal(0.0, 0.02, size=grid.shape)
        n_strokes = int(crng.integers(3, 6))
        strokes = []
        for _ in range(n_strokes):
            i, j = crng.choice(len(anchors), size=2, replace=False)
            p0, p2 = anchors[i], anchors[j]
            seg = p2 - p0
            normal = np.array([-seg[1], seg[0]])
            p1 = (p0 + p2) / 2 + crng.uniform(-0.3, 0.3) * normal
            strokes.append(np.stack([p0, p1, p2]))
        examples = []
        for j in range(n_per_class):
            erng = rng_stream(seed, f"glyph-example-{c}-{j}")
            ang = erng.uniform(-0.29, 0.29)
            scale = erng.uniform(0.78, 1.22)
            shear = erng.uniform(-0.19, 0.19)
            shift = erng.uniform(-0.08, 0.08, size=2)
            rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            aff = scale * rot @ np.array([[1.0, shear], [0.0, 1.0]])
            pts = np.concatenate(
                [_bezier(*(s + erng.normal(0.0, 0.024, size=(3, 2))), t) for s in strokes]
            )
            pts = (pts - 0.5) @ aff.T + 0.5 + shift
            hist, _, _ = np.histogram2d(
                pts[:, 1], pts[:, 0], bins=hi, range=[[0.0, 1.0], [0.0, 1.0]]
            )
            img = gaussian_filter(hist, sigma=1.2)
            peak = img.max()
            if peak > 0:
                img = img / peak
            img = img.reshape(image_size, 2, image_size, 2).mean(axis=(1, 3))
            img = img + erng.normal(0.0, 0.08, size=img.shape)
            examples.append(np.clip(img, 0.0, 1.0).astype(np.float32)[None, :, :])
        images.append(np.stack(examples))
    return ClassDataset(
        name=f"synth:{n_classes}x{n_per_class}x{image_size}:seed{seed}",
        class_names=[f"glyph{c:04d}" for c in range(n_classes)],
        images=images,
        n_train=[train_per_class] * n_classes,
    )


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint pretrain/transfer class sets over one dataset."""

    pretrain_classes: tuple
    transfer_classes: tuple
    seed: int

    def __post_init__(self):
        if set(self.pretrain_classes) & set(self.transfer_classes):
            raise ValueError("pretrain and transfer class sets overlap")

    def pretrain_label(self, class_id):
        return self.pretrain_classes.index(class_id)


def make_split(dataset, n_pretrain_classes, n_transfer_classes, seed):
    """Seeded uniform disjoint class split."""
    n = dataset.num_classes
    if n_pretrain_classes + n_transfer_classes > n:
        raise ValueError(
            f"split wants {n_pretrain_classes}+{n_transfer_classes} classes, dataset has {n}"
        )
    perm = rng_stream(seed, "class-split").permutation(n)
    pre = tuple(sorted(int(c) for c in perm[:n_pretrain_classes]))
    tr = tuple(sorted(int(c) for c in perm[n_pretrain_classes : n_pretrain_classes + n_transfer_classes]))
    return SplitPlan(pretrain_classes=pre, transfer_classes=tr, seed=seed)


@dataclass
class EpisodeBatch:
    """One adapting-plus-remembering episode's samples.

    ``x_inner`` holds K examples of a single class; ``x_rand`` holds R
    examples drawn from the whole pretrain split; ``x_outer`` is their
    concatenation. Labels are dense indices into the pretrain class list.
    """

    x_inner: np.ndarray
    y_inner: np.ndarray
    x_rand: np.ndarray
    y_rand: np.ndarray
    class_index: int  # dense pretrain label of the inner class
    class_id: int  # original dataset class id

    @property
    def x_outer(self):
        return np.concatenate([self.x_inner, self.x_rand])

    @property
    def y_outer(self):
        return np.concatenate([self.y_inner, self.y_rand])


def sample_episode(dataset, split, k_inner, r_remember, rng):
    """Sample one class, K of its training examples, and R remember examples.

    Inner examples are drawn without replacement while the class's train
    partition lasts; if K exceeds it, the partition is used once in random
    order and the remainder is redrawn with replacement. Remember examples
    are uniform over all pretrain-split training examples (the episode's own
    class is not excluded).
    """
    if k_inner < 1 or r_remember < 1:
        raise ValueError("k_inner and r_remember must be >= 1")
    classes = split.pretrain_classes
    if not classes:
        raise ValueError("empty pretrain split")

    c_pos = int(rng.integers(len(classes)))
    c = classes[c_pos]
    n_avail = dataset.n_train[c]
    if k_inner <= n_avail:
        idx = rng.choice(n_avail, size=k_inner, replace=False)
    else:
        idx = np.concatenate(
            [rng.permutation(n_avail), rng.choice(n_avail, size=k_inner - n_avail, replace=True)]
        )
    x_inner = dataset.images[c][idx]
    y_inner = np.full(k_inner, c_pos, dtype=np.int64)

    counts = np.array([dataset.n_train[ci] for ci in classes])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    flat = rng.choice(total, size=r_remember, replace=r_remember > total)
    owner = np.searchsorted(offsets, flat, side="right") - 1
    x_rand = np.stack([dataset.images[classes[o]][f - offsets[o]] for o, f in zip(owner, flat)])
    y_rand = owner.astype(np.int64)

    return EpisodeBatch(
        x_inner=x_inner, y_inner=y_inner, x_rand=x_rand, y_rand=y_rand,
        class_index=c_pos, class_id=int(c),
    )


def split_arrays(dataset, classes, part):
    """Stacked (X, y) over the given classes with dense labels.

    ``part`` selects the train or validation partition of each class; labels
    are positions within the (sorted) class tuple.
    """
    xs, ys = [], []
    for pos, c in enumerate(classes):
        arr = dataset.train_examples(c) if part == "train" else dataset.val_examples(c)
        xs.append(arr)
        ys.append(np.full(len(arr), pos, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)
