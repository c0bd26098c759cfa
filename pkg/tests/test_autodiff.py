import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqgan.autodiff import (
    Adam,
    Tensor,
    clip_global_norm,
    conv2d,
    conv_transpose2d,
    global_norm,
    grad,
    lecun_normal,
    load_checkpoint,
    save_checkpoint,
)
from lqgan.errors import DataError
from oracles import central_fd, rel_err


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_constant_loss_has_zero_gradient():
    x = Tensor([1.0, -2.0], requires_grad=True)
    (g,) = grad(Tensor(3.0) + x.sum() * 0.0, [x])
    np.testing.assert_array_equal(g.numpy(), [0.0, 0.0])


def test_unused_input_gets_zeros():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    gx, gy = grad((x * 2.0).sum(), [x, y])
    np.testing.assert_array_equal(gx.numpy(), 2.0)
    np.testing.assert_array_equal(gy.numpy(), 0.0)


def _fd_check(fn, *arrays, tol=1e-6):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    grads = grad(out, tensors)
    for k, (a, g) in enumerate(zip(arrays, grads)):
        def f(v, k=k):
            args = [Tensor(b) for b in arrays]
            args[k] = Tensor(v)
            return fn(*args).numpy()
        num = central_fd(f, a)
        assert rel_err(g.numpy(), num) < tol


def test_elementwise_ops_match_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))
    _fd_check(lambda x, y: ((x * y).tanh() + (x / y).sigmoid() - (y.log() * x).exp()).sum(), a, b)
    _fd_check(lambda x: (x.relu() + x.leaky_relu(0.2) + x.norm(axis=1).sum()).sum(), a + 0.05)
    _fd_check(lambda x, y: ((x @ y.reshape(4, 1)) ** 3).mean(), a, b)


def test_indexing_transpose_and_concat():
    from lqgan.autodiff import concatenate

    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(2, 3))
    _fd_check(lambda x, y: (concatenate([x, y], axis=0).T[1:, ::2] ** 2).sum(), a, b)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(3, 1), (1, 4), (4,), (1,), (3, 4)]))
def test_broadcast_gradient_sums_back(shape):
    rng = np.random.default_rng(len(shape))
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=shape)
    _fd_check(lambda x, y: ((x + y) * (x - y)).sum(), a, b)


def test_double_backward_of_cube():
    # d/dx sum(d/dx sum x^3) = d/dx sum(3x^2) = 6x
    x = Tensor([0.5, -1.0, 2.0], requires_grad=True)
    (g1,) = grad((x ** 3).sum(), [x], create_graph=True)
    (g2,) = grad(g1.sum(), [x])
    np.testing.assert_allclose(g2.numpy(), 6 * x.numpy(), rtol=1e-14)


def test_double_backward_through_mlp_input_gradient():
    rng = np.random.default_rng(2)
    w1 = rng.normal(size=(3, 5))
    w2 = rng.normal(size=(5, 1))
    z = rng.normal(size=(4, 3))

    def penalty(w1v, w2v):
        zt = Tensor(z, requires_grad=True)
        out = ((zt @ w1v).tanh() @ w2v).sum()
        (gz,) = grad(out, [zt], create_graph=True)
        return ((gz.norm(axis=1) - 1.0) ** 2).mean()

    _fd_check(penalty, w1, w2)


def _conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return out


def test_conv2d_matches_loop_oracle_and_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).numpy()
    np.testing.assert_allclose(got, _conv_oracle(x, w, b, 2, 1), atol=1e-12)
    _fd_check(lambda xv, wv: (conv2d(xv, wv, None, stride=2, padding=1) ** 2).sum(), x[:1, :, :5, :5], w)


def test_conv_transpose_is_adjoint_of_conv():
    # <conv(x), y> == <x, conv_T(y)> for the same weight
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 3, 7, 7))
    w = rng.normal(size=(5, 3, 3, 3))
    y_shape = conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).shape
    y = rng.normal(size=y_shape)
    lhs = float(np.sum(conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).numpy() * y))
    xt = conv_transpose2d(Tensor(y), Tensor(w), None, stride=2, padding=1).numpy()
    assert xt.shape == x.shape
    assert abs(lhs - float(np.sum(x * xt))) < 1e-10 * max(1.0, abs(lhs))


def test_clip_examples():
    g = [np.array([6.0, 8.0])]
    np.testing.assert_array_equal(clip_global_norm(g, 5.0)[0], [3.0, 4.0])
    g3 = [np.array([1.0, 2.0]), np.array([2.0])]
    assert global_norm(g3) == 3.0
    np.testing.assert_array_equal(clip_global_norm(g3, 5.0)[0], g3[0])
    np.testing.assert_array_equal(clip_global_norm([np.array([3.0, 4.0])], 1.0)[0], [0.6, 0.8])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(0.1, 10.0))
def test_clip_never_exceeds_and_is_idempotent(vals, c):
    g = [np.array(vals)]
    once = clip_global_norm(g, c)
    assert global_norm(once) <= c
    twice = clip_global_norm(once, c)
    np.testing.assert_array_equal(once[0], twice[0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.001, betas=(0.5, 0.999))
    opt.step([np.array([1.0])])
    # exact up to the eps=1e-8 term in the denominator
    assert p.data[0] == pytest.approx(-0.001, abs=1e-10)


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(1000):
        opt.step([2.0 * (p.data - 3.0)])
    assert abs(p.data[0] - 3.0) < 0.01


def test_lecun_normal_statistics_and_determinism():
    a = lecun_normal((10000,), fan_in=4, rng=np.random.default_rng(42))
    b = lecun_normal((10000,), fan_in=4, rng=np.random.default_rng(42))
    assert 0.2 <= a.var() <= 0.3
    np.testing.assert_array_equal(a, b)
    c = lecun_normal((10000,), fan_in=1, rng=np.random.default_rng(7))
    assert -0.05 <= c.mean() <= 0.05


def test_checkpoint_round_trip_and_corruption(tmp_path):
    blocks = {"a.w": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.ones(3, dtype=np.float32)}
    path = tmp_path / "c.lqg"
    save_checkpoint(path, blocks)
    back = load_checkpoint(path)
    assert list(back) == list(blocks)
    for k in blocks:
        assert back[k].dtype == blocks[k].dtype
        np.testing.assert_array_equal(back[k], blocks[k])
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DataError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX")
    with pytest.raises(DataError):
        load_checkpoint(path)
