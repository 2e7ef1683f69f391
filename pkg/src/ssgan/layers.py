"""Layer zoo for the generator and discriminator.

Each layer exposes ``params()`` (name -> Tensor, learnable), ``buffers()``
(name -> ndarray, non-learnable state) and ``forward(x, mode, rng)``.
``mode`` is ``"train"`` or ``"eval"``; eval mode never samples.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError, SSGANError
from .tensor import Tensor

TRAIN, EVAL = "train", "eval"

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
INIT_STD = 0.02


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise SSGANError(f"mode must be 'train' or 'eval', got {mode!r}", field="mode")


class Layer:
    kind = "layer"

    def params(self):
        return {}

    def buffers(self):
        return {}

    def forward(self, x, mode=EVAL, rng=None):
        raise NotImplementedError

    def astype(self, dtype):
        for p in self.params().values():
            p.data = p.data.astype(dtype)
        for name, b in self.buffers().items():
            setattr(self, name, b.astype(dtype))
        return self


class Dense(Layer):
    kind = "dense"

    def __init__(self, din, dout, rng=None, dtype=np.float32):
        w = rng.normal((din, dout), 0.0, INIT_STD, dtype) if rng else np.zeros((din, dout), dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, mode=EVAL, rng=None):
        return dense_forward(self, x)


def dense_forward(layer, x):
    din, dout = layer.weight.shape
    if x.ndim != 2 or x.shape[1] != din:
        raise ShapeError(f"dense expects (B, {din}) input, got {x.shape}", field="x")
    if layer.bias.shape != (dout,):
        raise ShapeError(f"dense bias must have shape ({dout},)", field="bias")
    return T.matmul(x, layer.weight) + layer.bias


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, cin, cout, k=4, stride=2, pad=1, rng=None, dtype=np.float32, bias=True):
        shape = (cout, cin, k, k)
        w = rng.normal(shape, 0.0, INIT_STD, dtype) if rng else np.zeros(shape, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype), requires_grad=True) if bias else None
        self.stride, self.pad = stride, pad

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, mode=EVAL, rng=None):
        y = T.conv2d(x, self.weight, self.stride, self.pad)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y


class ConvTranspose2d(Layer):
    kind = "convT"

    def __init__(self, cin, cout, k=4, stride=2, pad=1, rng=None, dtype=np.float32, bias=True):
        shape = (cin, cout, k, k)
        w = rng.normal(shape, 0.0, INIT_STD, dtype) if rng else np.zeros(shape, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype), requires_grad=True) if bias else None
        self.stride, self.pad = stride, pad

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, mode=EVAL, rng=None):
        y = T.conv2d_transpose(x, self.weight, self.stride, self.pad)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y


class BatchNorm(Layer):
    """Batch normalization with running statistics.

    Running stats follow ``running <- (1 - momentum) * running + momentum * batch``
    using the biased batch variance the forward pass normalized with.
    """

    kind = "batchnorm"

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS, dtype=np.float32):
        if not 0.0 <= momentum <= 1.0:
            raise SSGANError("momentum must lie in [0, 1]", field="momentum")
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum, self.eps = momentum, eps
        # Off during the generator sub-step so D's statistics see only D updates.
        self.track_stats = True

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, mode=EVAL, rng=None):
        return batchnorm_forward(self, x, mode)


def batchnorm_forward(state, x, mode=TRAIN):
    _check_mode(mode)
    if x.ndim < 2 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batchnorm over {state.gamma.shape[0]} channels got {x.shape}",
                         field="x")
    if mode == EVAL:
        out, _, _ = T.batch_norm(x, state.gamma, state.beta, state.eps,
                                 state.running_mean, state.running_var)
        return out
    if x.shape[0] < 2:
        raise ShapeError("batchnorm in train mode needs a batch of at least 2", field="x")
    out, mu, var = T.batch_norm(x, state.gamma, state.beta, state.eps)
    if state.track_stats:
        m = state.momentum
        dt = state.running_mean.dtype
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(dt)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(dt)
    return out


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope=LEAKY_SLOPE):
        if not 0.0 <= slope < 1.0:
            raise SSGANError("slope must lie in [0, 1)", field="slope")
        self.slope = slope

    def forward(self, x, mode=EVAL, rng=None):
        return T.leaky_relu(x, self.slope)


def leaky_relu(x, slope=LEAKY_SLOPE):
    if not 0.0 <= slope < 1.0:
        raise SSGANError("slope must lie in [0, 1)", field="slope")
    return T.leaky_relu(x, slope)


def sigmoid(x):
    return T.sigmoid(x)


def softmax(logits):
    """Row-wise softmax over the last axis with max-subtraction."""
    return T.softmax(logits, axis=-1)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, mode=EVAL, rng=None):
        return T.tanh(x)


class GaussianNoise(Layer):
    """Additive zero-mean Gaussian noise, active in train mode only.

    ``frozen`` pins a noise array so the layer becomes deterministic, which is
    how gradient checks treat it.
    """

    kind = "noise"

    def __init__(self, std=0.5):
        if std < 0:
            raise DomainError(f"negative noise std {std}", field="std")
        self.std = std
        self.frozen = None

    def forward(self, x, mode=EVAL, rng=None):
        if self.frozen is not None and mode == TRAIN:
            return x + Tensor(self.frozen.astype(x.dtype, copy=False))
        return gaussian_noise_forward(x, self.std, mode, rng)


def gaussian_noise_forward(x, std, mode, rng):
    _check_mode(mode)
    if std < 0:
        raise DomainError(f"negative noise std {std}", field="std")
    if mode == EVAL or std == 0:
        return x
    if rng is None:
        raise SSGANError("train-mode noise needs a RandomSource", field="rng")
    return x + T.sample_gaussian(rng, x.shape, 0.0, std, dtype=x.dtype)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode=EVAL, rng=None):
        return x.reshape(x.shape[0], -1)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x, mode=EVAL, rng=None):
        return x.reshape((x.shape[0],) + self.shape)
