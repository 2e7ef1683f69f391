"""Finite-difference verification of every layer and loss gradient.

Each check builds a small random graph ``f(x) -> scalar`` for a trial and
compares tape gradients against central differences with
:func:`ssgan.tensor.grad_check`. A check covers inputs and parameters by
checking each of them as ``x`` in turn.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as Lyr
from . import losses as L
from . import tensor as T
from .models import DiscriminatorOutput, build_discriminator, build_generator
from .tensor import RandomSource, Tensor

THRESHOLD = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    op: str
    trials: int
    max_error: float
    seconds: float

    @property
    def passed(self):
        return self.max_error < THRESHOLD


def _away_from_zero(g, shape, margin=0.05):
    """Uniform values with |x| >= margin so kinks (leaky relu) are not straddled."""
    x = g.uniform(margin, 1.5, size=shape)
    return x * g.choice([-1.0, 1.0], size=shape)


def _projector(g, shape):
    return g.normal(size=shape)


def _weighted(y, r):
    return (y * Tensor(r.astype(y.dtype))).sum()


def _out(logits):
    probs = T.softmax(logits, axis=1)
    return DiscriminatorOutput(logits, probs, logits)


# ---- individual checks: each returns a list of (f, x) pairs in float64


def _dense(g):
    b, din, dout = g.integers(2, 5), g.integers(2, 6), g.integers(2, 5)
    x, w, bias = g.normal(size=(b, din)), g.normal(size=(din, dout)), g.normal(size=dout)
    r = _projector(g, (b, dout))

    def run(xx, ww, bb):
        layer = Lyr.Dense(din, dout, dtype=np.float64)
        layer.weight, layer.bias = ww, bb
        return _weighted(Lyr.dense_forward(layer, xx), r)

    return [
        (lambda t: run(t, Tensor(w), Tensor(bias)), x),
        (lambda t: run(Tensor(x), t, Tensor(bias)), w),
        (lambda t: run(Tensor(x), Tensor(w), t), bias),
    ]


def _conv_geometry(g):
    stride, pad = int(g.integers(1, 3)), int(g.integers(0, 2))
    k = int(g.integers(1, 4))
    h = int(g.integers(max(k - 2 * pad, 1), 6))
    return stride, pad, k, h


def _conv(g):
    stride, pad, k, h = _conv_geometry(g)
    n, c, f = 2, int(g.integers(1, 3)), int(g.integers(1, 3))
    x, w = g.normal(size=(n, c, h, h)), g.normal(size=(f, c, k, k))
    ho = (h + 2 * pad - k) // stride + 1
    r = _projector(g, (n, f, ho, ho))
    run = lambda xx, ww: _weighted(T.conv2d(xx, ww, stride, pad), r)  # noqa: E731
    return [(lambda t: run(t, Tensor(w)), x), (lambda t: run(Tensor(x), t), w)]


def _conv_t(g):
    stride, pad = int(g.integers(1, 3)), int(g.integers(0, 2))
    k = int(g.integers(2, 4))
    h = int(g.integers(2, 4))
    if (h - 1) * stride - 2 * pad + k < 1:
        pad = 0
    n, f, c = 2, int(g.integers(1, 3)), int(g.integers(1, 3))
    x, w = g.normal(size=(n, f, h, h)), g.normal(size=(f, c, k, k))
    ho = (h - 1) * stride - 2 * pad + k
    r = _projector(g, (n, c, ho, ho))
    run = lambda xx, ww: _weighted(T.conv2d_transpose(xx, ww, stride, pad), r)  # noqa: E731
    return [(lambda t: run(t, Tensor(w)), x), (lambda t: run(Tensor(x), t), w)]


def _batchnorm(g):
    spatial = bool(g.integers(0, 2))
    c = int(g.integers(1, 4))
    shape = (int(g.integers(3, 6)), c, 2, 2) if spatial else (int(g.integers(3, 7)), c)
    x = g.normal(size=shape) * 2.0 + 0.5
    gamma, beta = g.normal(size=c) + 1.0, g.normal(size=c)
    rm, rv = g.normal(size=c), g.uniform(0.5, 2.0, size=c)
    r = _projector(g, shape)

    def run(xx, gg, bb, mode):
        st = Lyr.BatchNorm(c, dtype=np.float64)
        st.gamma, st.beta = gg, bb
        st.running_mean, st.running_var = rm.copy(), rv.copy()
        return _weighted(Lyr.batchnorm_forward(st, xx, mode), r)

    pairs = []
    for mode in (Lyr.TRAIN, Lyr.EVAL):
        pairs += [
            (lambda t, m=mode: run(t, Tensor(gamma), Tensor(beta), m), x),
            (lambda t, m=mode: run(Tensor(x), t, Tensor(beta), m), gamma),
            (lambda t, m=mode: run(Tensor(x), Tensor(gamma), t, m), beta),
        ]
    return pairs


def _leaky(g):
    shape = (int(g.integers(1, 4)), int(g.integers(1, 6)))
    x, r = _away_from_zero(g, shape), _projector(g, shape)
    return [(lambda t: _weighted(Lyr.leaky_relu(t, 0.2), r), x)]


def _sigmoid(g):
    shape = (int(g.integers(1, 4)), int(g.integers(1, 6)))
    x, r = g.normal(size=shape) * 3, _projector(g, shape)
    return [(lambda t: _weighted(Lyr.sigmoid(t), r), x)]


def _softmax(g):
    shape = (int(g.integers(1, 4)), int(g.integers(2, 6)))
    x, r = g.normal(size=shape) * 2, _projector(g, shape)
    return [(lambda t: _weighted(Lyr.softmax(t), r), x)]


def _noise(g):
    shape = (int(g.integers(2, 4)), int(g.integers(1, 5)))
    x, r = g.normal(size=shape), _projector(g, shape)
    frozen = g.normal(size=shape) * 0.5
    layer = Lyr.GaussianNoise(0.5)
    layer.frozen = frozen

    def run(t):
        return _weighted(T.tanh(layer.forward(t, Lyr.TRAIN)), r)

    return [(run, x)]


def _logit_batch(g, k=None):
    k = k or int(g.integers(2, 5))
    b = int(g.integers(1, 5))
    return k, g.normal(size=(b, k + 1)) * 1.5


def _theta(g):
    k, z = _logit_batch(g)
    labels = g.integers(1, k + 1, size=z.shape[0])
    smooth = [None, 0.9][int(g.integers(0, 2))]
    return [(lambda t: L.supervised_loss(_out(t), labels, smoothing=smooth), z)]


def _delta(g):
    k, zr = _logit_batch(g)
    zf = g.normal(size=(int(g.integers(1, 4)), k + 1)) * 1.5
    return [
        (lambda t: L.unsupervised_loss(_out(t), _out(Tensor(zf))), zr),
        (lambda t: L.unsupervised_loss(_out(Tensor(zr)), _out(t)), zf),
    ]


def _total(g):
    k, zr = _logit_batch(g)
    zf = g.normal(size=(zr.shape[0], k + 1)) * 1.5
    labels = g.integers(1, k + 1, size=zr.shape[0])

    def run(t):
        out = _out(t)
        real, fake = out.rows(slice(0, len(zr))), out.rows(slice(len(zr), None))
        return L.total_loss(L.supervised_loss(real, labels), L.unsupervised_loss(real, fake))

    return [(run, np.concatenate([zr, zf]))]


def _feature_matching(g):
    f = int(g.integers(1, 6))
    a = g.normal(size=(int(g.integers(1, 5)), f))
    b = g.normal(size=(int(g.integers(1, 5)), f))
    return [
        (lambda t: L.feature_matching_loss(t, Tensor(b)), a),
        (lambda t: L.feature_matching_loss(Tensor(a), t), b),
    ]


def _nonsaturating(g):
    k, z = _logit_batch(g)
    return [(lambda t: L.generator_loss("nonsaturating", _out(t), _out(t)), z)]


def _vanilla_d(g):
    b = int(g.integers(1, 5))
    xr, xf = g.normal(size=b), g.normal(size=b)
    return [
        (lambda t: L.vanilla_d_objective(T.sigmoid(t), T.sigmoid(Tensor(xf))), xr),
        (lambda t: L.vanilla_d_objective(T.sigmoid(Tensor(xr)), T.sigmoid(t)), xf),
    ]


def _vanilla_g(g):
    xf = g.normal(size=int(g.integers(1, 5)))
    return [(lambda t: L.vanilla_g_objective(T.sigmoid(t)), xf)]


def _composite(g):
    """conv -> batchnorm -> leaky relu -> dense -> softmax cross-entropy."""
    n, c, h, f, k = 3, 1, 4, 2, 3
    x = g.normal(size=(n, c, h, h))
    w = g.normal(size=(f, c, 3, 3))
    gamma, beta = g.normal(size=f) + 1.0, g.normal(size=f)
    dw = g.normal(size=(f * 2 * 2, k + 1))
    labels = g.integers(1, k + 1, size=n)

    def run(xx, ww, gg, dd):
        y = T.conv2d(xx, ww, 2, 1)
        bn = Lyr.BatchNorm(f, dtype=np.float64)
        bn.gamma, bn.beta = gg, Tensor(beta)
        y = Lyr.leaky_relu(Lyr.batchnorm_forward(bn, y, Lyr.TRAIN))
        logits = T.matmul(y.reshape(n, -1), dd)
        return L.supervised_loss(_out(logits), labels)

    return [
        (lambda t: run(t, Tensor(w), Tensor(gamma), Tensor(dw)), x),
        (lambda t: run(Tensor(x), t, Tensor(gamma), Tensor(dw)), w),
        (lambda t: run(Tensor(x), Tensor(w), t, Tensor(dw)), gamma),
        (lambda t: run(Tensor(x), Tensor(w), Tensor(gamma), t), dw),
    ]


def _gan_composite(g):
    """Tiny generator feeding the discriminator; gradient w.r.t. one generator weight."""
    seed = int(g.integers(0, 2 ** 31))
    gen = build_generator(4, (1, 8, 8), (2, 2), seed=seed, dtype=np.float64)
    disc = build_discriminator(2, (1, 8, 8), (2, 2), noise_std=0.0, seed=seed + 1,
                               dtype=np.float64)
    for _, p in disc.parameters().items():
        p.data = p.data * 25.0  # lift init scale so gradients are O(1)
    for _, p in gen.parameters().items():
        p.data = p.data * 25.0
    z = g.normal(size=(3, 4))
    names = list(gen.parameters())
    target = names[int(g.integers(0, len(names)))]
    base = gen.parameters()[target].data.copy()

    def run(t):
        p = gen.parameters()[target]
        p.data = t.data
        saved = p.requires_grad
        # swap the live parameter for the probe tensor
        layer_name, attr = target[2:].rsplit(".", 1)
        layer = dict(gen.layers)[layer_name]
        setattr(layer, attr, t)
        try:
            fake = gen.forward(Tensor(z), Lyr.TRAIN)
            out = disc.forward(fake, Lyr.EVAL)
            return L.generator_loss("nonsaturating", out, out) + fake.mean()
        finally:
            setattr(layer, attr, p)
            p.requires_grad = saved

    return [(run, base)]


CHECKS = {
    "dense": _dense,
    "conv2d": _conv,
    "conv2d_transpose": _conv_t,
    "batchnorm": _batchnorm,
    "leaky_relu": _leaky,
    "sigmoid": _sigmoid,
    "softmax": _softmax,
    "noise_frozen": _noise,
    "supervised_loss": _theta,
    "unsupervised_loss": _delta,
    "total_loss": _total,
    "feature_matching_loss": _feature_matching,
    "generator_loss_nonsaturating": _nonsaturating,
    "vanilla_d_objective": _vanilla_d,
    "vanilla_g_objective": _vanilla_g,
    "composite_graph": _composite,
    "generator_discriminator": _gan_composite,
}


def _analytic_single(f, x):
    xt = Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    with T.Tape() as tape:
        y = f(xt)
    return tape.backward(y, [xt])[0].astype(np.float64)


def run_check(name, trials=20, seed=0, precision="double", h=STEP):
    """Max relative error of check ``name`` over ``trials`` random instances."""
    build = CHECKS[name]
    rng = RandomSource(seed).fork(f"gradcheck.{name}")
    worst = 0.0
    start = time.perf_counter()
    for _ in range(trials):
        for f, x in build(rng.generator):
            x = np.asarray(x, dtype=np.float64)
            analytic = _analytic_single(f, x) if precision == "single" else None
            err = T.grad_check(f, Tensor(x), h, analytic=analytic)
            worst = max(worst, err)
    return CheckResult(name, trials, worst, time.perf_counter() - start)


def run_suite(trials=20, seed=0, precision="double", names=None):
    return [run_check(n, trials, seed, precision) for n in (names or CHECKS)]


def format_table(results):
    width = max(len(r.op) for r in results)
    lines = [f"{'op':<{width}}  trials  max_rel_error  status"]
    for r in results:
        lines.append(f"{r.op:<{width}}  {r.trials:>6}  {r.max_error:>13.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
