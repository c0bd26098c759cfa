import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqgan.autodiff import Tensor, grad
from lqgan.errors import DataError, ShapeError
from lqgan.nets import AeConfig, AeHyper, Autoencoder, Mlp, MlpConfig, critic_forward, mlp_param_count, train_ae
from oracles import central_fd, rel_err


def _dense_count(widths):
    # independent recount: weights plus biases of each affine map
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


@pytest.mark.parametrize("hidden,expected", [([200, 100], 25201), ([350, 175], 70351), ([125, 62], 11000)])
def test_critic_counts(hidden, expected):
    cfg = MlpConfig.critic(hidden)
    assert mlp_param_count(cfg) == expected == _dense_count([24, *hidden, 1])
    assert Mlp(cfg, np.random.default_rng(0)).num_params == expected


@pytest.mark.parametrize("hidden,expected", [([50, 25], 2449), ([400, 200], 89424)])
def test_generator_counts(hidden, expected):
    cfg = MlpConfig.generator(hidden)
    assert mlp_param_count(cfg) == expected == _dense_count([10, *hidden, 24])


def test_zero_weights_give_zero_outputs():
    for cfg in (MlpConfig.critic([8, 4]), MlpConfig.generator([8, 4])):
        net = Mlp(cfg, np.random.default_rng(0))
        for t in net.params.values():
            t.data[...] = 0.0
        x = np.random.default_rng(1).normal(size=(5, cfg.d_in))
        np.testing.assert_array_equal(net(x).numpy(), 0.0)


def test_mlp_matches_numpy_forward():
    cfg = MlpConfig.critic([6, 5], d_in=4)
    net = Mlp(cfg, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(7, 4))
    P = {k: v.data for k, v in net.params.items()}
    h = x @ P["l0.W"] + P["l0.b"]
    h = np.where(h > 0, h, 0.2 * h)
    h = h @ P["l1.W"] + P["l1.b"]
    h = np.where(h > 0, h, 0.2 * h)
    want = (h @ P["l2.W"] + P["l2.b"])[:, 0]
    np.testing.assert_allclose(critic_forward(net, x).numpy(), want, atol=1e-13)


def test_mlp_parameter_gradients_match_fd():
    cfg = MlpConfig.generator([6, 5], d_noise=3, d_out=4)
    net = Mlp(cfg, np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(3, 3))
    w = net.params["l1.W"]
    (g,) = grad(net(x).sum(), [w])

    def f(v):
        old = w.data.copy()
        w.data[...] = v
        out = net(x).numpy().sum()
        w.data[...] = old
        return out

    assert rel_err(g.numpy(), central_fd(f, w.data.copy())) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_generator_output_bounded(seed, scale):
    net = Mlp(MlpConfig.generator([8, 4]), np.random.default_rng(seed))
    out = net(scale * np.random.default_rng(seed + 1).normal(size=(6, 10))).numpy()
    assert np.all(np.abs(out) <= 1.0)


def test_wrong_input_width_raises():
    net = Mlp(MlpConfig.critic([4, 2]), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net(np.zeros((2, 23)))


def _small_ae(seed=0, **kw):
    cfg = AeConfig(conv_channels=(4, 8), fc_width=32, **kw)
    return Autoencoder(cfg, np.random.default_rng(seed))


def test_ae_round_trip_shapes_and_ranges():
    ae = _small_ae()
    for n in (1, 3):
        x = np.random.default_rng(n).uniform(size=(n, 28, 28, 3))
        z = ae.encode_array(x)
        assert z.shape == (n, 24) and np.all(np.abs(z) <= 1)
        r = ae.reconstruct_array(x)
        assert r.shape == x.shape and r.min() >= 0 and r.max() <= 1


def test_ae_rejects_wrong_image_shape():
    with pytest.raises(DataError):
        _small_ae().encode_array(np.zeros((2, 28, 28, 4)))


def test_ae_dropout_zero_train_equals_eval_without_batchnorm():
    ae = _small_ae(batchnorm=False)
    x = np.random.default_rng(0).uniform(size=(4, 28, 28, 3))
    train_out = ae.train()(x).numpy()
    eval_out = ae.eval()(x).numpy()
    np.testing.assert_array_equal(train_out, eval_out)


def test_ae_training_is_deterministic_and_reduces_loss():
    x = np.random.default_rng(9).uniform(size=(24, 28, 28, 3))
    hyper = AeHyper(epochs=3, batch=8)
    h1 = train_ae(_small_ae(1), x, hyper, seed=42)
    h2 = train_ae(_small_ae(1), x, hyper, seed=42)
    assert h1.train_mse == h2.train_mse
    assert h1.train_mse[-1] < h1.train_mse[0]


def test_ae_state_blocks_round_trip():
    a = _small_ae(0)
    b = _small_ae(1)
    b.load_blocks(a.state_blocks("ae."), "ae.")
    x = np.random.default_rng(0).uniform(size=(2, 28, 28, 3))
    np.testing.assert_array_equal(a.reconstruct_array(x), b.reconstruct_array(x))
