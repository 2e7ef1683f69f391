"""Time the compiled im2col/col2im kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Also times one conv2d forward+backward through each backend.
"""
import argparse
import importlib
import os
import sys
import timeit

import numpy as np

from ssgan import _kernels_py

CASES = [
    # name, (batch, channels, side), kernel, stride, pad
    ("16x16 input layer", (128, 1, 16), 4, 2, 1),
    ("8x8 hidden layer", (128, 32, 8), 4, 2, 1),
    ("64x64 input layer", (64, 3, 64), 4, 2, 1),
    ("32x32 hidden layer", (64, 64, 32), 4, 2, 1),
]


def load_compiled():
    try:
        return importlib.import_module("ssgan._kernels")
    except ImportError:
        return None


def best_of(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_case(impl, shape, k, stride, pad, repeat):
    n, c, side = shape
    x = np.random.default_rng(0).standard_normal((n, c, side, side), dtype=np.float32)
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))))
    hp = side + 2 * pad
    ho = (hp - k) // stride + 1
    cols = impl.im2col(xp, k, k, stride, ho, ho)
    cols = np.ascontiguousarray(cols)
    t_im = best_of(lambda: impl.im2col(xp, k, k, stride, ho, ho), repeat)
    t_col = best_of(lambda: impl.col2im(cols, c, hp, hp, k, k, stride, ho, ho), repeat)
    return t_im, t_col


def bench_conv(backend, repeat):
    """conv2d forward+backward with the backend chosen at import time."""
    os.environ["SSGAN_PURE_PYTHON"] = "1" if backend == "python" else "0"
    for mod in [m for m in sys.modules if m.startswith("ssgan")]:
        del sys.modules[mod]
    from ssgan import kernels, tensor as T
    assert kernels.BACKEND == backend, kernels.BACKEND
    g = np.random.default_rng(1)
    x = T.Tensor(g.standard_normal((128, 16, 8, 8), dtype=np.float32))
    w = T.Tensor(g.standard_normal((32, 16, 4, 4), dtype=np.float32))

    def step():
        with T.Tape() as tape:
            loss = T.conv2d(x, w, 2, 1).sum()
        tape.backward(loss, [x, w])

    return best_of(step, repeat)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    compiled = load_compiled()
    if compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'case':<20} {'kernel':<7} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for name, shape, k, stride, pad in CASES:
        py = bench_case(_kernels_py, shape, k, stride, pad, args.repeat)
        cc = bench_case(compiled, shape, k, stride, pad, args.repeat) if compiled else (None, None)
        for label, a, b in (("im2col", py[0], cc[0]), ("col2im", py[1], cc[1])):
            fast = f"{b * 1e3:12.3f}" if b else f"{'-':>12}"
            ratio = f"{a / b:7.2f}x" if b else f"{'-':>8}"
            print(f"{name:<20} {label:<7} {a * 1e3:10.3f} {fast} {ratio}")
    t_py = bench_conv("python", args.repeat)
    line = f"{'conv2d fwd+bwd':<20} {'':<7} {t_py * 1e3:10.3f}"
    if compiled:
        t_cc = bench_conv("compiled", args.repeat)
        line += f" {t_cc * 1e3:12.3f} {t_py / t_cc:7.2f}x"
    print(line)


if __name__ == "__main__":
    main()
