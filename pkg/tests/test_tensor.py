import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssgan import _kernels_py, kernels
from ssgan import tensor as T
from ssgan.errors import DomainError, ShapeError, SSGANError
from ssgan.tensor import RandomSource, Tape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                s += xp[b, ch, i * stride + di, j * stride + dj] * w[o, ch, di, dj]
                    out[b, o, i, j] = s
    return out


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_mul_identity(self):
        x = Tensor([1.5, -2.0, 3.25])
        np.testing.assert_array_equal(T.elementwise("mul", x, 1).data, x.data)

    def test_log_e(self):
        assert T.elementwise("log", Tensor([math.e])).data[0] == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("kind", ["sub", "div", "neg", "exp", "tanh"])
    def test_kinds_match_numpy(self, kind):
        a, b = np.array([0.5, 1.5]), np.array([2.0, -4.0])
        ref = {"sub": a - b, "div": a / b, "neg": -a, "exp": np.exp(a), "tanh": np.tanh(a)}[kind]
        np.testing.assert_allclose(T.elementwise(kind, Tensor(a), Tensor(b)).data, ref)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.elementwise("add", Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.elementwise("log", Tensor([1.0, 0.0]))

    def test_unknown_kind(self):
        with pytest.raises(SSGANError):
            T.elementwise("pow", Tensor([1.0]), 2)


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)

    def test_ones(self):
        assert T.matmul(Tensor([[1.0, 1.0]]), Tensor([[1.0], [1.0]])).data.tolist() == [[2.0]]

    def test_against_triple_loop(self):
        g = np.random.default_rng(3)
        a, b = g.normal(size=(5, 7)), g.normal(size=(7, 3))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b),
                                   atol=1e-12, rtol=0)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv:
    def test_ones(self):
        y = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 4.0))

    def test_shape(self):
        y = T.conv2d(Tensor(np.zeros((1, 3, 64, 64))), Tensor(np.zeros((8, 3, 4, 4))), 2, 1)
        assert y.shape == (1, 8, 32, 32)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (2, 0), (3, 2)])
    def test_against_sliding_window(self, stride, pad):
        g = np.random.default_rng(stride * 10 + pad)
        x, w = g.normal(size=(2, 3, 6, 5)), g.normal(size=(4, 3, 3, 2))
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride, pad).data,
                                   naive_conv(x, w, stride, pad), atol=1e-10, rtol=0)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_transpose_blocks(self):
        y = T.conv2d_transpose(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), 2, 0)
        np.testing.assert_array_equal(y.data, np.ones((1, 1, 4, 4)))

    def test_transpose_shape(self):
        y = T.conv2d_transpose(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((8, 3, 4, 4))), 2, 1)
        assert y.shape == (1, 3, 8, 8)

    def test_transpose_degenerate(self):
        with pytest.raises(ShapeError):
            T.conv2d_transpose(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1))), 1, 1)

    def test_adjoint(self):
        g = np.random.default_rng(11)
        x, k = g.normal(size=(2, 3, 7, 7)), g.normal(size=(4, 3, 3, 3))
        y = T.conv2d(Tensor(x), Tensor(k), 2, 1)
        r = g.normal(size=y.shape)
        back = T.conv2d_transpose(Tensor(r), Tensor(k), 2, 1)
        assert abs((y.data * r).sum() - (x * back.data).sum()) < 1e-10


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 3), f=st.integers(1, 3), h=st.integers(1, 9),
       k=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_shape_contract(n, c, f, h, k, stride, pad):
    if h + 2 * pad < k:
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((n, c, h, h))), Tensor(np.zeros((f, c, k, k))), stride, pad)
        return
    y = T.conv2d(Tensor(np.zeros((n, c, h, h))), Tensor(np.zeros((f, c, k, k))), stride, pad)
    assert y.shape == (n, f, (h + 2 * pad - k) // stride + 1, (h + 2 * pad - k) // stride + 1)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 6), k=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_transpose_shape_contract(h, k, stride, pad):
    size = (h - 1) * stride - 2 * pad + k
    x, w = Tensor(np.zeros((2, 3, h, h))), Tensor(np.zeros((3, 2, k, k)))
    if size < 1:
        with pytest.raises(ShapeError):
            T.conv2d_transpose(x, w, stride, pad)
    else:
        assert T.conv2d_transpose(x, w, stride, pad).shape == (2, 2, size, size)


def test_compiled_and_python_kernels_agree():
    if kernels.BACKEND != "compiled":
        pytest.skip("compiled kernels not built")
    g = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        xp = g.normal(size=(2, 3, 9, 9)).astype(dtype)
        a = kernels.im2col(xp, 3, 3, 2, 4, 4)
        b = _kernels_py.im2col(xp, 3, 3, 2, 4, 4)
        np.testing.assert_array_equal(a, b)
        cols = g.normal(size=(2, 27, 16)).astype(dtype)
        np.testing.assert_allclose(kernels.col2im(cols, 3, 9, 9, 3, 3, 2, 4, 4),
                                   _kernels_py.col2im(cols, 3, 9, 9, 3, 3, 2, 4, 4), rtol=1e-6)


class TestReduce:
    def test_mean(self):
        assert T.reduce("mean", Tensor([1.0, 2.0, 3.0])).item() == 2.0

    def test_empty_axes_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert T.reduce("sum", x, ()) is x

    def test_max_axis(self):
        assert T.reduce("max", Tensor([[1.0, 5.0], [3.0, 2.0]]), 1).data.tolist() == [5.0, 3.0]

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            T.reduce("sum", Tensor(np.ones((2, 2))), 2)


class TestBackward:
    def test_sum_gradient_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        np.testing.assert_array_equal(tape.backward(loss, [x])[0], np.ones((2, 3, 4)))

    def test_constant_loss_zero_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = (w * 2.0).sum()
        gx, gw = tape.backward(loss, [x, w])
        np.testing.assert_array_equal(gx, 0.0)
        np.testing.assert_array_equal(gw, 2.0)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y, [x])

    def test_single_use(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x.sum()
        tape.backward(y, [x])
        with pytest.raises(SSGANError):
            tape.backward(y, [x])

    def test_fanout_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = (x * x + x * 2.0).sum()
        assert tape.backward(y, [x])[0][0] == pytest.approx(8.0)

    def test_dict_of_registered_parameters(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = (a * b).sum()
        grads = tape.backward(y)
        assert list(grads) == [a, b]
        assert grads[a][0] == 2.0 and grads[b][0] == 1.0

    def test_no_tape_no_record(self):
        x = Tensor([1.0], requires_grad=True)
        assert not (x * 2.0).requires_grad


class TestGradCheck:
    def test_square(self):
        err = T.grad_check(lambda t: (t * t).sum(), Tensor([3.0]), 1e-5)
        assert err < 1e-8

    @pytest.mark.parametrize("h", [1e-1, 1e-3, 1e-6])
    def test_linear_any_step(self, h):
        w = np.array([0.5, -2.0, 3.0])
        err = T.grad_check(lambda t: (t * Tensor(w)).sum(), Tensor([1.0, 2.0, 3.0]), h)
        assert err < 1e-8  # roundoff ~ eps*|f|/h

    def test_non_finite(self):
        with pytest.raises(DomainError):
            T.grad_check(lambda t: (t / 0.0).sum(), Tensor([1.0]))

    def test_detects_wrong_gradient(self):
        with T.inject_fault("tanh"):
            err = T.grad_check(lambda t: T.tanh(t).sum(), Tensor([0.3, -0.7]))
        assert err > 1.0


class TestRandom:
    def test_zero_std(self):
        x = T.sample_gaussian(RandomSource(1), (3, 4), 0.0, 0.0)
        np.testing.assert_array_equal(x.data, 0.0)

    def test_seed_repeatable(self):
        a = [T.sample_gaussian(RandomSource(7), (5,), 0, 1).data for _ in range(2)]
        r = RandomSource(7)
        seq1 = [T.sample_gaussian(r, (3,), 0, 1).data for _ in range(3)]
        r = RandomSource(7)
        seq2 = [T.sample_gaussian(r, (3,), 0, 1).data for _ in range(3)]
        np.testing.assert_array_equal(a[0], a[1])
        for u, v in zip(seq1, seq2):
            np.testing.assert_array_equal(u, v)

    def test_statistics(self):
        x = T.sample_gaussian(RandomSource(2024), (100_000,), 0.0, 0.5, dtype=np.float64).data
        assert abs(x.mean()) < 0.01
        assert 0.49 <= x.std() <= 0.51

    def test_negative_std(self):
        with pytest.raises(DomainError):
            T.sample_gaussian(RandomSource(0), (2,), 0.0, -1.0)

    def test_forks_are_independent_and_stable(self):
        a = RandomSource(5).fork("noise").normal((4,))
        b = RandomSource(5).fork("noise").normal((4,))
        c = RandomSource(5).fork("init").normal((4,))
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_state_roundtrip(self):
        r = RandomSource(9)
        r.normal((10,))
        state = r.get_state()
        x = r.normal((5,))
        r2 = RandomSource.from_state(state)
        np.testing.assert_array_equal(r2.normal((5,)), x)
