"""Partially labeled image datasets: loading, split protocols, label stripping.

Class indices are 1-based (1..k) everywhere in this module. A sample's label
is ``None`` when it is unlabeled.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError
from .tensor import RandomSource

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_VERSION = 1


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float32 in [-1, 1]
    label: int | None
    source_id: str
    class_index: int = 0  # true class, kept even when the label is withheld

    @property
    def labeled(self):
        return self.label is not None


@dataclass
class Dataset:
    class_names: list
    train: list
    test: list = field(default_factory=list)
    image_shape: tuple = (3, 64, 64)
    root: str | None = None
    warnings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.class_names)

    def manifest(self):
        """source id -> {split, labeled, class}, plus the parameters that produced it."""
        entries = {}
        for split, samples in (("train", self.train), ("test", self.test)):
            for s in samples:
                entries[s.source_id] = {
                    "split": split,
                    "labeled": "labeled" if s.labeled else "unlabeled",
                    "class": self.class_names[s.class_index - 1],
                }
        return {
            "version": MANIFEST_VERSION,
            "root": self.root,
            "image_shape": list(self.image_shape),
            "classes": list(self.class_names),
            **self.meta,
            "warnings": list(self.warnings),
            "samples": dict(sorted(entries.items())),
        }

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- preprocessing

def preprocess_image(pixels, image_shape):
    """Resize a decoded raster (bilinear) to ``image_shape`` and scale to [-1, 1].

    ``pixels`` is an (H, W) or (H, W, C) uint8-range array or a PIL image.
    A raster already at the target size is not resampled.
    """
    c, h, w = image_shape
    img = pixels if isinstance(pixels, Image.Image) else None
    if img is None:
        arr = np.asarray(pixels)
        if arr.ndim not in (2, 3) or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise DataError(f"zero-area or malformed raster of shape {arr.shape}", field="pixels")
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        img = Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))
    if img.width == 0 or img.height == 0:
        raise DataError("zero-area image", field="pixels")
    img = img.convert("L" if c == 1 else "RGB")
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr / np.float32(127.5) - np.float32(1.0)


# ---------------------------------------------------------------- loading

def _class_dirs(root):
    return sorted(e.name for e in os.scandir(root) if e.is_dir() and not e.name.startswith("."))


def load_dataset(root, image_shape=(3, 64, 64)):
    """Read ``root/<class_name>/<image>`` into an unsplit dataset (everything in ``train``).

    Classes are numbered by sorted directory name. Undecodable files are
    skipped and recorded in ``warnings``.
    """
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root!r} does not exist", field="root")
    classes = _class_dirs(root)
    if not classes:
        raise DataError(f"no class directories under {root!r}", field="root")
    samples, warnings = [], []
    for idx, name in enumerate(classes, start=1):
        cdir = os.path.join(root, name)
        for fname in sorted(os.listdir(cdir)):
            if not fname.lower().endswith(IMAGE_SUFFIXES):
                continue
            sid = f"{name}/{fname}"
            try:
                with Image.open(os.path.join(cdir, fname)) as img:
                    img.load()
                    image = preprocess_image(img, image_shape)
            except (UnidentifiedImageError, OSError, DataError) as exc:
                msg = f"skipped {sid}: {exc}"
                log.warning(msg)
                warnings.append(msg)
                continue
            samples.append(Sample(image, idx, sid, idx))
    return Dataset(classes, samples, [], tuple(image_shape), os.path.abspath(root), warnings)


def write_dataset_tree(dataset, root):
    """Dump every sample as ``root/<class>/<id>.png`` (inverse of :func:`load_dataset`)."""
    for s in dataset.train + dataset.test:
        name = dataset.class_names[s.class_index - 1]
        os.makedirs(os.path.join(root, name), exist_ok=True)
        pix = np.clip(np.rint((s.image + 1.0) * 127.5), 0, 255).astype(np.uint8)
        img = Image.fromarray(pix[0] if pix.shape[0] == 1 else pix.transpose(1, 2, 0))
        base = os.path.basename(s.source_id)
        stem = os.path.splitext(base)[0]
        img.save(os.path.join(root, name, f"{stem}.png"))


# ---------------------------------------------------------------- protocols

PROTOCOLS = {"eth": (750, 250), "indian": (80, None)}


def parse_protocol(protocol):
    """'eth' | 'indian' | 'fraction:<p>' | ('fraction', p) -> normalized tuple."""
    if isinstance(protocol, tuple):
        return protocol
    if protocol in PROTOCOLS:
        return (protocol,)
    if isinstance(protocol, str) and protocol.startswith("fraction"):
        _, _, p = protocol.partition(":")
        try:
            frac = float(p)
        except ValueError:
            raise DataError(f"bad fraction protocol {protocol!r}", field="protocol") from None
        if not 0.0 < frac < 1.0:
            raise DataError("fraction must lie in (0, 1)", field="protocol")
        return ("fraction", frac)
    raise DataError(f"unknown protocol {protocol!r}; use eth, indian or fraction:<p>",
                    field="protocol")


def _split_counts(proto, n, class_name):
    kind = proto[0]
    if kind == "eth":
        train, test = PROTOCOLS["eth"]
        if n < train + test:
            raise DataError(f"class {class_name!r} has {n} images; eth protocol needs "
                            f"{train + test}", field=class_name)
        return train, test
    if kind == "indian":
        train = PROTOCOLS["indian"][0]
        if n < train + 1:
            raise DataError(f"class {class_name!r} has {n} images; indian protocol needs at "
                            f"least {train + 1}", field=class_name)
        return train, n - train
    train = int(round(proto[1] * n))
    if train < 1 or train >= n:
        raise DataError(f"class {class_name!r} has {n} images; too few for fraction "
                        f"{proto[1]}", field=class_name)
    return train, n - train


def split_train_test(dataset, protocol, seed):
    """Per-class seeded shuffle, then the protocol's train/test counts.

    eth: 750 train / 250 test (extra images are left out); indian: 80 train /
    the rest test; fraction:p: round(p*n) train. Labels are restored on every
    sample; use :func:`strip_labels` afterwards.
    """
    proto = parse_protocol(protocol)
    pool = sorted(dataset.train + dataset.test, key=lambda s: s.source_id)
    root = RandomSource(seed).fork("split")
    train, test = [], []
    for idx, name in enumerate(dataset.class_names, start=1):
        members = [s for s in pool if s.class_index == idx]
        n_train, n_test = _split_counts(proto, len(members), name)
        order = root.fork(name).permutation(len(members))
        chosen = [members[i] for i in order]
        train += [dataclasses.replace(s, label=idx) for s in chosen[:n_train]]
        test += [dataclasses.replace(s, label=idx) for s in chosen[n_train:n_train + n_test]]
    meta = dict(dataset.meta, protocol=_protocol_name(proto), split_seed=seed)
    return dataset.replace(train=train, test=test, meta=meta)


def _protocol_name(proto):
    return proto[0] if proto[0] != "fraction" else f"fraction:{proto[1]}"


def strip_labels(dataset, unlabeled_fraction, seed):
    """Withhold labels from round(u * n_c) training samples of every class c.

    Images stay in the train split; the test split is untouched.
    """
    u = float(unlabeled_fraction)
    if not 0.0 <= u <= 1.0:
        raise DataError(f"unlabeled fraction must lie in [0, 1], got {u}", field="unlabeled_fraction")
    root = RandomSource(seed).fork("strip")
    drop = set()
    for idx, name in enumerate(dataset.class_names, start=1):
        members = [s.source_id for s in dataset.train if s.class_index == idx]
        count = _round_half_up(u * len(members))
        order = root.fork(name).permutation(len(members))
        drop.update(members[i] for i in order[:count])
    train = [dataclasses.replace(s, label=None if s.source_id in drop else s.class_index)
             for s in dataset.train]
    meta = dict(dataset.meta, unlabeled_fraction=u, strip_seed=seed)
    return dataset.replace(train=train, meta=meta)


def _round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def save_manifest(dataset, path):
    text = json.dumps(dataset.manifest(), indent=2, sort_keys=False) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_from_manifest(path, root=None):
    """Rebuild a split, partially labeled dataset from a manifest and its image tree."""
    with open(path, encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {man.get('version')}", field="version")
    root = root or man["root"]
    shape = tuple(man["image_shape"])
    classes = list(man["classes"])
    full = load_dataset(root, shape)
    if full.class_names != classes:
        raise DataError("class directories differ from the manifest", field="classes")
    by_id = {s.source_id: s for s in full.train}
    train, test = [], []
    for sid, entry in man["samples"].items():
        if sid not in by_id:
            raise DataError(f"manifest names missing image {sid!r}", field=sid)
        s = by_id[sid]
        label = s.class_index if entry["labeled"] == "labeled" else None
        (train if entry["split"] == "train" else test).append(dataclasses.replace(s, label=label))
    meta = {k: man[k] for k in ("protocol", "split_seed", "unlabeled_fraction", "strip_seed")
            if k in man}
    return Dataset(classes, train, test, shape, root, list(man.get("warnings", [])), meta)


# ---------------------------------------------------------------- synthetic shapes

def _disc(yy, xx, r):
    return (yy ** 2 + xx ** 2 <= r ** 2).astype(float)


def _ring(yy, xx, r):
    d = np.sqrt(yy ** 2 + xx ** 2)
    return ((d <= r) & (d >= 0.55 * r)).astype(float)


def _cross(yy, xx, r):
    w = 0.3 * r
    inside = (np.abs(yy) <= r) & (np.abs(xx) <= r)
    return (inside & ((np.abs(yy) <= w) | (np.abs(xx) <= w))).astype(float)


def _hstripes(yy, xx, r):
    inside = (np.abs(yy) <= r) & (np.abs(xx) <= r)
    return (inside & (np.floor(yy / (0.5 * r)) % 2 == 0)).astype(float)


def _vstripes(yy, xx, r):
    return _hstripes(xx, yy, r)


def _checker(yy, xx, r):
    inside = (np.abs(yy) <= r) & (np.abs(xx) <= r)
    c = (np.floor(yy / (0.5 * r)) + np.floor(xx / (0.5 * r))) % 2 == 0
    return (inside & c).astype(float)


def _square(yy, xx, r):
    return ((np.abs(yy) <= 0.8 * r) & (np.abs(xx) <= 0.8 * r)).astype(float)


def _frame(yy, xx, r):
    m = np.maximum(np.abs(yy), np.abs(xx))
    return ((m <= 0.9 * r) & (m >= 0.55 * r)).astype(float)


def _triangle(yy, xx, r):
    return ((yy <= 0.8 * r) & (yy >= -0.8 * r) & (np.abs(xx) <= (yy + 0.8 * r) * 0.6)).astype(float)


def _xshape(yy, xx, r):
    inside = (np.abs(yy) <= r) & (np.abs(xx) <= r)
    return (inside & ((np.abs(yy - xx) <= 0.35 * r) | (np.abs(yy + xx) <= 0.35 * r))).astype(float)


def _diag(yy, xx, r):
    inside = (np.abs(yy) <= r) & (np.abs(xx) <= r)
    return (inside & (np.floor((yy + xx) / (0.6 * r)) % 2 == 0)).astype(float)


def _hbar(yy, xx, r):
    return ((np.abs(yy) <= 0.3 * r) & (np.abs(xx) <= r)).astype(float)


def _vbar(yy, xx, r):
    return _hbar(xx, yy, r)


def _dots(yy, xx, r):
    s = 0.5 * r
    cy = np.round(yy / s) * s
    cx = np.round(xx / s) * s
    near = (yy - cy) ** 2 + (xx - cx) ** 2 <= (0.22 * r) ** 2
    return (near & (np.abs(yy) <= r) & (np.abs(xx) <= r)).astype(float)


def _half(yy, xx, r):
    return ((yy ** 2 + xx ** 2 <= r ** 2) & (yy <= 0)).astype(float)


def _diamond(yy, xx, r):
    return (np.abs(yy) + np.abs(xx) <= r).astype(float)


SHAPES = {
    "disc": _disc, "ring": _ring, "cross": _cross, "hstripes": _hstripes,
    "vstripes": _vstripes, "checker": _checker, "square": _square, "frame": _frame,
    "triangle": _triangle, "xshape": _xshape, "diagonal": _diag, "hbar": _hbar,
    "vbar": _vbar, "dots": _dots, "halfdisc": _half, "diamond": _diamond,
}


def render_shape(kind, side, cy=0.0, cx=0.0, scale=0.35, angle=0.0, contrast=1.0,
                 background=0.0, noise=None):
    """Draw one grayscale shape as a (1, side, side) array in [-1, 1]."""
    coords = (np.arange(side) + 0.5) / side - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    yy, xx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    ry, rx = ca * yy - sa * xx, sa * yy + ca * xx
    # 2x2 supersampling for smooth edges
    off = 0.25 / side
    acc = np.zeros_like(yy)
    for dy in (-off, off):
        for dx in (-off, off):
            acc += SHAPES[kind](ry + dy, rx + dx, scale)
    img = background + contrast * acc / 4.0
    if noise is not None:
        img = img + noise
    return np.clip(img * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)[None]


def make_synthetic(k=4, per_class=100, side=16, seed=0, clean=False, jitter=0.05, noise_std=0.25,
                   scale_range=(0.26, 0.38), max_angle=0.4, contrast_range=(0.5, 1.0)):
    """Procedural grayscale shape classes with seeded pose/contrast/pixel noise.

    ``clean=True`` renders the same poses without pixel noise, contrast or
    background variation. Every sample sits in ``train``; split it with
    :func:`split_train_test`.
    """
    if not 2 <= k <= len(SHAPES):
        raise DataError(f"k must lie in [2, {len(SHAPES)}] (available shape generators), got {k}",
                        field="k")
    if side not in (8, 16, 32):
        raise DataError(f"side must be one of 8, 16, 32, got {side}", field="side")
    kinds = list(SHAPES)[:k]
    rng = RandomSource(seed).fork("synthetic")
    samples = []
    for ci, kind in enumerate(kinds, start=1):
        for j in range(per_class):
            g = rng.generator
            cy, cx = g.uniform(-jitter, jitter, size=2)
            scale = g.uniform(*scale_range)
            angle = g.uniform(-max_angle, max_angle)
            contrast = g.uniform(*contrast_range)
            background = g.uniform(0.0, 0.4)
            noise = g.normal(0.0, noise_std, size=(side, side))
            if clean:
                img = render_shape(kind, side, cy, cx, scale, angle)
            else:
                img = render_shape(kind, side, cy, cx, scale, angle, contrast,
                                   background * (1 - contrast), noise)
            samples.append(Sample(img, ci, f"{kind}/{kind}_{j:05d}", ci))
    return Dataset(kinds, samples, [], (1, side, side), None, [],
                   {"synthetic": {"k": k, "per_class": per_class, "side": side, "seed": seed}})
