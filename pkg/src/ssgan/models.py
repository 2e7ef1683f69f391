"""DCGAN-style generator and the K+1-headed discriminator/classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, SSGANError
from .layers import (
    EVAL, TRAIN, BatchNorm, Conv2d, ConvTranspose2d, Dense, Flatten, GaussianNoise,
    LeakyReLU, Reshape, Tanh, softmax,
)
from .tensor import RandomSource, Tensor

DEFAULT_WIDTHS_64 = (64, 128, 256, 512)
DEFAULT_WIDTHS_16 = (32, 64)


def default_widths(side):
    return DEFAULT_WIDTHS_64 if side >= 64 else DEFAULT_WIDTHS_16


def _check_image_shape(image_shape, widths):
    if len(image_shape) != 3:
        raise ShapeError(f"image shape must be (C, H, W), got {image_shape}", field="image_shape")
    c, h, w = image_shape
    if h != w or h < 8 or h & (h - 1):
        raise ShapeError(f"image side must be a square power of two >= 8, got {h}x{w}",
                         field="image_shape")
    if not widths or h >> len(widths) < 1:
        raise ShapeError(f"{len(widths)} blocks cannot fit a {h}x{h} image", field="channel_widths")
    if c < 1:
        raise ShapeError("image needs at least one channel", field="image_shape")


class _Network:
    """Ordered named layers with parameter/buffer bookkeeping."""

    prefix = ""

    def __init__(self):
        self.layers = []

    def add(self, name, layer):
        self.layers.append((name, layer))
        return layer

    def parameters(self):
        out = {}
        for lname, layer in self.layers:
            for pname, p in layer.params().items():
                out[f"{self.prefix}{lname}.{pname}"] = p
        return out

    def buffers(self):
        out = {}
        for lname, layer in self.layers:
            for bname, b in layer.buffers().items():
                out[f"{self.prefix}{lname}.{bname}"] = b
        return out

    def state_dict(self):
        state = {k: v.data.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state):
        params = self.parameters()
        for name, p in params.items():
            _assign(name, state, p.shape)
            p.data = np.array(state[name], dtype=p.dtype)
        for lname, layer in self.layers:
            for bname, b in layer.buffers().items():
                full = f"{self.prefix}{lname}.{bname}"
                _assign(full, state, b.shape)
                setattr(layer, bname, np.array(state[full], dtype=b.dtype))

    def astype(self, dtype):
        for _, layer in self.layers:
            layer.astype(dtype)
        return self

    def set_stat_tracking(self, on):
        for _, layer in self.layers:
            if isinstance(layer, BatchNorm):
                layer.track_stats = on

    def noise_layers(self):
        return [layer for _, layer in self.layers if isinstance(layer, GaussianNoise)]


def _assign(name, state, shape):
    if name not in state:
        raise ShapeError(f"missing tensor {name!r}", field=name)
    got = np.shape(state[name])
    if tuple(got) != tuple(shape):
        raise ShapeError(f"tensor {name!r} has shape {got}, model expects {shape}", field=name)


class Generator(_Network):
    prefix = "g."

    def __init__(self, latent_dim, image_shape, channel_widths):
        super().__init__()
        self.latent_dim = latent_dim
        self.image_shape = tuple(image_shape)
        self.channel_widths = tuple(channel_widths)

    def config(self):
        return {"latent_dim": self.latent_dim, "image_shape": list(self.image_shape),
                "channel_widths": list(self.channel_widths)}

    def forward(self, z, mode=TRAIN):
        return forward_generator(self, z, mode)

    __call__ = forward


def build_generator(latent_dim=100, image_shape=(3, 64, 64), channel_widths=None, seed=0,
                    dtype=np.float32):
    """Dense projection, then (convT -> batchnorm -> LeakyReLU) blocks, then convT -> tanh."""
    if latent_dim < 1:
        raise SSGANError("latent_dim must be >= 1", field="latent_dim")
    widths = tuple(channel_widths or default_widths(image_shape[-1]))
    _check_image_shape(image_shape, widths)
    c, side, _ = image_shape
    n = len(widths)
    s0 = side >> n
    rng = seed if isinstance(seed, RandomSource) else RandomSource(seed).fork("init.g")
    g = Generator(latent_dim, image_shape, widths)
    g.add("project", Dense(latent_dim, widths[-1] * s0 * s0, rng, dtype))
    g.add("reshape", Reshape((widths[-1], s0, s0)))
    g.add("bn_project", BatchNorm(widths[-1], dtype=dtype))
    g.add("act_project", LeakyReLU())
    for i in range(n - 1, 0, -1):
        g.add(f"up{i}", ConvTranspose2d(widths[i], widths[i - 1], rng=rng, dtype=dtype, bias=False))
        g.add(f"bn_up{i}", BatchNorm(widths[i - 1], dtype=dtype))
        g.add(f"act_up{i}", LeakyReLU())
    g.add("out", ConvTranspose2d(widths[0], c, rng=rng, dtype=dtype))
    g.add("tanh", Tanh())
    return g


def forward_generator(g, z, mode=TRAIN):
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if z.ndim != 2 or z.shape[1] != g.latent_dim:
        raise ShapeError(f"latent batch must be (B, {g.latent_dim}), got {z.shape}", field="z")
    x = z
    for _, layer in g.layers:
        x = layer.forward(x, mode)
    return x


@dataclass
class DiscriminatorOutput:
    logits: Tensor
    probs: Tensor
    features: Tensor

    def rows(self, index):
        """Sub-batch view; ops stay on the tape."""
        return DiscriminatorOutput(self.logits[index], self.probs[index], self.features[index])


class Discriminator(_Network):
    prefix = "d."

    def __init__(self, num_classes, image_shape, channel_widths, noise_std, head):
        super().__init__()
        self.num_classes = num_classes
        self.image_shape = tuple(image_shape)
        self.channel_widths = tuple(channel_widths)
        self.noise_std = noise_std
        self.head = head
        self.tap = None

    @property
    def head_width(self):
        return self.num_classes + 1 if self.head == "softmax" else 1

    def config(self):
        return {"num_classes": self.num_classes, "image_shape": list(self.image_shape),
                "channel_widths": list(self.channel_widths), "noise_std": self.noise_std,
                "head": self.head}

    def forward(self, x, mode=TRAIN, rng=None):
        return forward_discriminator(self, x, mode, rng)

    __call__ = forward


def build_discriminator(k, image_shape=(3, 64, 64), channel_widths=None, noise_std=0.5, seed=0,
                        head="softmax", dtype=np.float32):
    """Noise, then (conv -> [batchnorm] -> LeakyReLU -> noise) blocks, flatten, dense head.

    ``head="softmax"`` gives the k+1 logits of the semi-supervised classifier;
    ``head="sigmoid"`` a single real/fake unit for the vanilla GAN baseline.
    The first block skips batchnorm, as in DCGAN.
    """
    if head == "softmax" and k < 2:
        raise SSGANError(f"need at least 2 real classes, got k={k}", field="k")
    if head not in ("softmax", "sigmoid"):
        raise SSGANError(f"unknown head {head!r}", field="head")
    widths = tuple(channel_widths or default_widths(image_shape[-1]))
    _check_image_shape(image_shape, widths)
    c, side, _ = image_shape
    rng = seed if isinstance(seed, RandomSource) else RandomSource(seed).fork("init.d")
    d = Discriminator(k, image_shape, widths, noise_std, head)
    d.add("noise_in", GaussianNoise(noise_std))
    cin = c
    for i, w in enumerate(widths):
        d.add(f"conv{i}", Conv2d(cin, w, rng=rng, dtype=dtype, bias=(i == 0)))
        if i > 0:
            d.add(f"bn{i}", BatchNorm(w, dtype=dtype))
        d.add(f"act{i}", LeakyReLU())
        d.tap = f"act{i}"
        d.add(f"noise{i}", GaussianNoise(noise_std))
        cin = w
    d.add("flatten", Flatten())
    feat = widths[-1] * (side >> len(widths)) ** 2
    d.add("head", Dense(feat, d.head_width, rng, dtype))
    return d


def forward_discriminator(d, x, mode=TRAIN, rng=None):
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.shape[1:] != d.image_shape:
        raise ShapeError(f"discriminator expects (B, {d.image_shape}), got {x.shape}", field="x")
    features = None
    for name, layer in d.layers:
        x = layer.forward(x, mode, rng)
        if name == d.tap:
            features = x.reshape(x.shape[0], -1)
    logits = x
    probs = softmax(logits) if d.head == "softmax" else T.sigmoid(logits)
    return DiscriminatorOutput(logits, probs, features)


def real_score(out):
    """Per-sample probability of being real: 1 - p(fake | x)."""
    k = out.probs.shape[1] - 1
    return 1.0 - out.probs[:, k]
