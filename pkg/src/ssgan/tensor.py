"""Dense tensors with a reverse-mode differentiation tape.

Every op returns a new :class:`Tensor`. When a :class:`Tape` is active (used as
a context manager) and at least one input requires a gradient, the op appends
a node holding its inputs and a closure mapping the output gradient to input
gradients. :meth:`Tape.backward` replays those nodes in reverse order.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss, [w])[0]
    array([2., 4.])
"""
from __future__ import annotations

import contextlib
import zlib

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError, SSGANError

_TAPES: list = []
_FAULTS: set = set()


class Tensor:
    """An n-dimensional array plus a ``requires_grad`` flag.

    ``data`` is a numpy array; its dtype (float32 for training, float64 for
    gradient checks) propagates through every op.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops executed inside its ``with`` block.

    A tape is single-use: after :meth:`backward` it refuses a second replay.
    """

    def __init__(self):
        self.nodes = []
        self._leaves = {}
        self._outputs = set()
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def _record(self, op, out, inputs, backward):
        for t in inputs:
            if t.requires_grad and id(t) not in self._outputs and id(t) not in self._leaves:
                self._leaves[id(t)] = t
        self._outputs.add(id(out))
        self.nodes.append(_Node(op, out, inputs, backward))

    def parameters(self):
        """Leaf tensors requiring gradients, in order of first use."""
        return list(self._leaves.values())

    def backward(self, loss, params=None):
        """Gradients of scalar ``loss``.

        Returns a list aligned with ``params``; when ``params`` is None a dict
        keyed by every leaf parameter seen on the tape. Parameters the loss
        does not depend on receive zeros.
        """
        if self._consumed:
            raise SSGANError("tape already replayed; record a fresh forward pass")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", field="loss")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            if node.op in _FAULTS:
                in_grads = tuple(None if x is None else -x for x in in_grads)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if params is None:
            params = self.parameters()
            return {p: _as_grad(grads.get(id(p)), p) for p in params}
        return [_as_grad(grads.get(id(p)), p) for p in params]


def _as_grad(g, p):
    if g is None:
        return np.zeros_like(p.data)
    return np.asarray(g, dtype=p.data.dtype).reshape(p.shape)


def backward(tape, loss, params=None):
    """Functional alias for :meth:`Tape.backward`."""
    return tape.backward(loss, params)


@contextlib.contextmanager
def inject_fault(op):
    """Test hook: flip the sign of every input gradient produced by ``op``."""
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


def _tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op, data, inputs, backward):
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _TAPES[-1]
        tape._record(op, out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_shapes(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match", field="b") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    _binary_shapes("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _binary_shapes("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _binary_shapes("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    _binary_shapes("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _tensor(b, a)
    b = _tensor(b)
    return _tensor(a, b), b


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value", field="a")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a):
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope=0.2):
    x = a.data
    s = x.dtype.type(slope)
    if 0 <= slope <= 1:
        out = np.maximum(x, x * s)
    else:
        out = np.where(x >= 0, x, x * s)
    # local derivative: 1 where x >= 0, slope elsewhere
    scale = np.where(x >= 0, x.dtype.type(1), s)
    return _make("leaky_relu", out, (a,), lambda g: (g * scale,))


def clip(a, lo, hi):
    """Clamp values into [lo, hi]; the gradient is zero where clamping was active."""
    x = a.data
    inside = ((x >= lo) & (x <= hi)).astype(x.dtype)
    return _make("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


_UNARY = {"neg": neg, "exp": exp, "log": log, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind, a, b=None):
    """Dispatch ``kind`` in {add, sub, mul, div, neg, exp, log, tanh}."""
    a = _tensor(a)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise SSGANError(f"{kind} needs a second operand", field="b")
        return _BINARY[kind](a, b)
    raise SSGANError(f"unknown elementwise op {kind!r}", field="op_kind")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}", field="b")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (F,C,kh,kw)."""
    if stride < 1 or pad < 0:
        raise SSGANError("conv2d: stride must be >= 1 and pad >= 0", field="stride")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}",
                         field="kernel")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}",
                         field="kernel")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(f, -1)
    out = np.matmul(kmat, cols).reshape(n, f, ho, wo)

    def back(g):
        g2 = g.reshape(n, f, ho * wo)
        dk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        dcols = np.matmul(kmat.T, g2)
        dxp = kernels.col2im(dcols, c, hp, wp, kh, kw, stride, ho, wo)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return dx, dk

    return _make("conv2d", out, (x, kernel), back)


def conv2d_transpose(x, kernel, stride=1, pad=0):
    """Fractionally-strided convolution: the adjoint of :func:`conv2d` in its input.

    ``x`` is (N,F,H,W), ``kernel`` is (F,C,kh,kw), output (N,C,H',W') with
    H' = (H-1)*stride - 2*pad + kh.
    """
    if stride < 1 or pad < 0:
        raise SSGANError("conv2d_transpose: stride must be >= 1 and pad >= 0", field="stride")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"conv2d_transpose: input {x.shape} incompatible with kernel "
                         f"{kernel.shape}", field="kernel")
    n, f, h, w = x.shape
    _, c, kh, kw = kernel.shape
    ho, wo = (h - 1) * stride - 2 * pad + kh, (w - 1) * stride - 2 * pad + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: degenerate output size {ho}x{wo}", field="pad")
    hp, wp = ho + 2 * pad, wo + 2 * pad
    kmat = kernel.data.reshape(f, -1)
    x2 = x.data.reshape(n, f, h * w)
    cols = np.matmul(kmat.T, x2)
    outp = kernels.col2im(cols, c, hp, wp, kh, kw, stride, h, w)
    out = outp[:, :, pad:pad + ho, pad:pad + wo] if pad else outp

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = kernels.im2col(gp, kh, kw, stride, h, w)
        dx = np.matmul(kmat, gcols).reshape(x.shape)
        dk = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        return dx, dk

    return _make("conv2d_transpose", np.ascontiguousarray(out), (x, kernel), back)


# ---------------------------------------------------------------- reductions & shape

def _norm_axes(a, axes):
    if axes is None:
        return tuple(range(a.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {a.shape}", field="axes")
        out.append(ax % a.ndim)
    return tuple(sorted(set(out)))


def reduce(kind, a, axes=None, keepdims=False):
    """``kind`` in {sum, mean, max}; ``axes=()`` returns the input unchanged."""
    if kind not in ("sum", "mean", "max"):
        raise SSGANError(f"unknown reduction {kind!r}", field="op_kind")
    axes = _norm_axes(a, axes)
    if not axes:
        return a
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    if kind == "max":
        m = a.data.max(axis=axes, keepdims=True)
        mask = (a.data == m).astype(a.dtype)
        mask /= mask.sum(axis=axes, keepdims=True)
        out = m if keepdims else m.reshape([n for i, n in enumerate(a.shape) if i not in axes])
        return _make("max", out, (a,), lambda g: (mask * g.reshape(kept_shape),))
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        out = out / count
    scale = 1.0 / count if kind == "mean" else 1.0

    def back(g):
        return (np.broadcast_to(g.reshape(kept_shape) * scale, a.shape).copy(),)

    return _make(kind, out, (a,), back)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}", field="shape") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def index_select(a, index):
    """Basic or integer-array indexing with scatter-add backward."""
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("index", np.array(out, copy=True), (a,), back)


def concat(tensors, axis=0):
    tensors = [_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}", field="tensors") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(tensors), back)


# ---------------------------------------------------------------- softmax family

def logsumexp(a, axis=-1, keepdims=False):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = np.exp(x - m)
    total = s.sum(axis=axis, keepdims=True)
    out = m + np.log(total)
    soft = s / total
    res = out if keepdims else np.squeeze(out, axis=axis)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return _make("logsumexp", res, (a,), back)


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make("softmax", p, (a,), back)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), back)


# ---------------------------------------------------------------- normalization

def batch_norm(x, gamma, beta, eps=1e-5, mean=None, var=None):
    """Per-channel normalization over every axis but 1.

    With ``mean``/``var`` None the batch statistics are used (and returned as
    the second and third results); otherwise the supplied running statistics.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    train = mean is None
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    else:
        mu = np.asarray(mean, dtype=x.dtype)
        var = np.asarray(var, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    count = x.size // x.shape[1]

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.data.reshape(bshape)
        if train:
            dx = (inv.reshape(bshape) / count) * (
                count * gx
                - gx.sum(axis=axes, keepdims=True)
                - xhat * (gx * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = gx * inv.reshape(bshape)
        return dx, dgamma, dbeta

    out_t = _make("batchnorm", out, (x, gamma, beta), back)
    return out_t, mu, var


# ---------------------------------------------------------------- randomness

class RandomSource:
    """Seeded PCG64 stream (numpy's documented, platform-stable bit generator).

    ``fork(name)`` derives an independent named substream from the same root
    seed, so one integer reproduces every random draw of an experiment.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def fork(self, name):
        return RandomSource(self.seed, self._key + (zlib.crc32(name.encode("utf-8")),))

    def normal(self, shape, mean=0.0, std=1.0, dtype=np.float64):
        dtype = np.dtype(dtype)
        draw = self.generator.standard_normal(
            size=shape, dtype=np.float32 if dtype == np.float32 else np.float64)
        if std != 1.0:
            draw *= dtype.type(std)
        if mean != 0.0:
            draw += dtype.type(mean)
        return draw.astype(dtype, copy=False)

    def integers(self, high, size=None):
        return self.generator.integers(0, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def get_state(self):
        return {"seed": self.seed, "key": list(self._key),
                "bit_generator": self.generator.bit_generator.state}

    def set_state(self, state):
        self.seed = int(state["seed"])
        self._key = tuple(state["key"])
        self.generator.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state):
        rng = cls(state["seed"], state["key"])
        rng.set_state(state)
        return rng


def sample_gaussian(rng, shape, mean=0.0, std=1.0, dtype=np.float32):
    if std < 0:
        raise DomainError(f"negative standard deviation {std}", field="std")
    if std == 0:
        return Tensor(np.full(shape, mean, dtype=dtype))
    return Tensor(rng.normal(shape, mean, std, dtype=dtype))


# ---------------------------------------------------------------- gradient check

def grad_check(f, x, h=1e-5, analytic=None):
    """Max elementwise relative error between tape and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. The error per element is
    |a - n| / max(|a|, |n|, 1e-8). ``analytic`` may supply a precomputed
    gradient (e.g. from a lower-precision run of the same graph).
    """
    if h <= 0:
        raise SSGANError("step h must be positive", field="h")
    base = np.array(x.data, dtype=np.float64)
    if analytic is None:
        xt = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            y = f(xt)
        _check_finite(y)
        analytic = tape.backward(y, [xt])[0]
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(base.copy()))
        flat[i] = old - h
        fm = f(Tensor(base.copy()))
        flat[i] = old
        _check_finite(fp)
        _check_finite(fm)
        nflat[i] = (float(fp.data) - float(fm.data)) / (2 * h)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(base.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check_finite(y):
    if not np.all(np.isfinite(y.data)):
        raise DomainError("function returned a non-finite value", field="f")
