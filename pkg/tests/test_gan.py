import numpy as np
import pytest

from lqgan import gan, quantum
from lqgan.autodiff import Tensor
from lqgan.errors import ConfigError, NumericalError
from lqgan.nets import Module
from lqgan.rng import stream
from oracles import central_fd, rel_err


class LinearCritic:
    """D(z) = z . w, a test double with a closed-form input gradient."""

    def __init__(self, w):
        self.w = Tensor(np.asarray(w, dtype=float).reshape(-1, 1), requires_grad=True)
        self.params = {"w": self.w}

    def score(self, z):
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=float))
        return (z @ self.w).reshape(z.shape[0])


class LinearGenerator(Module):
    """G(xi) = xi @ A, a classical linear generator."""

    prefix = "lin."

    def __init__(self, a):
        super().__init__()
        self.add_param("A", np.asarray(a, dtype=float))
        self.noise_dim, self.latent_dim = self.params["A"].shape

    def forward(self, xi):
        return Tensor(np.asarray(xi, dtype=float)) @ self.params["A"]

    def generate(self, xi):
        return np.asarray(xi, dtype=float) @ self.params["A"].data


class GradRecorder:
    """Optimizer stand-in that stores the gradients it is given."""

    def __init__(self, params):
        self.names = list(params)
        self.grads = None
        self.applied = 0

    def step(self, grads):
        self.grads = [np.array(g) for g in grads]
        self.applied += 1


def _cfg(**kw):
    base = dict(batch=8, max_steps=10, eval_interval=5, eval_cohort=64, epochs=1000)
    base.update(kw)
    return gan.GanTrainConfig(**base)


@pytest.mark.parametrize("norm,expected", [(1.0, 0.0), (3.0, 4.0)])
def test_gradient_penalty_of_linear_critic(norm, expected):
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    w *= norm / np.linalg.norm(w)
    critic = LinearCritic(w)
    for seed in range(3):
        r = np.random.default_rng(seed)
        gp = gan.gradient_penalty(critic, r.normal(size=(6, 5)), r.normal(size=(6, 5)), rng=r)
        assert gp.item() == pytest.approx(expected, abs=1e-12)


def test_gradient_penalty_batch_mismatch():
    with pytest.raises(Exception):
        gan.gradient_penalty(LinearCritic(np.ones(3)), np.zeros((4, 3)), np.zeros((5, 3)), eps=np.zeros(4))


def test_gradient_penalty_is_differentiable_in_critic_params():
    rng = np.random.default_rng(1)
    critic = gan.Critic([6, 4], rng, d_in=3)
    zr, zf, eps = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.random(5)
    w = critic.params["l0.W"]
    from lqgan.autodiff import grad

    (g,) = grad(gan.gradient_penalty(critic, zr, zf, eps=eps), [w])

    def f(v):
        old = w.data.copy()
        w.data[...] = v
        out = gan.gradient_penalty(critic, zr, zf, eps=eps).item()
        w.data[...] = old
        return out

    assert rel_err(g.numpy(), central_fd(f, w.data.copy())) < 1e-6


def test_critic_step_constant_critic_no_penalty_is_zero():
    rng = np.random.default_rng(2)
    critic = gan.Critic([4, 3], rng, d_in=2)
    for t in critic.params.values():
        t.data[...] = 0.0
    gen = LinearGenerator(rng.normal(size=(3, 2)))
    opt = gan.Adam(critic.params, 0.1, (0.5, 0.999), clip=5.0)
    before = {k: v.data.copy() for k, v in critic.params.items()}
    out = gan.critic_step(critic, gen, rng.normal(size=(8, 2)), opt, _cfg(lambda_gp=0.0),
                          rng.normal(size=(8, 3)), rng.random(8))
    assert out.loss_d == 0.0 and out.gp == 0.0
    for k, v in critic.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_lambda_zero_reduces_to_wasserstein_estimate():
    rng = np.random.default_rng(3)
    critic = gan.Critic([4, 3], rng, d_in=2)
    gen = LinearGenerator(rng.normal(size=(3, 2)))
    z_real, xi = rng.normal(size=(8, 2)), rng.normal(size=(8, 3))
    want = critic.score(gen.generate(xi)).numpy().mean() - critic.score(z_real).numpy().mean()
    out = gan.critic_step(critic, gen, z_real, GradRecorder(critic.params), _cfg(lambda_gp=0.0), xi, rng.random(8))
    assert out.loss_d == out.wasserstein == pytest.approx(want, rel=1e-14)


def test_critic_step_descends_on_fixed_batch():
    rng = np.random.default_rng(4)
    critic = gan.Critic([8, 4], rng, d_in=2)
    gen = LinearGenerator(rng.normal(size=(3, 2)))
    z_real, xi, eps = rng.normal(size=(8, 2)) + 1.0, rng.normal(size=(8, 3)), rng.random(8)
    opt = gan.Adam(critic.params, 1e-3, (0.5, 0.999), clip=5.0)
    first = gan.critic_step(critic, gen, z_real, opt, _cfg(), xi, eps).loss_d
    again = gan.critic_step(critic, gen, z_real, GradRecorder(critic.params), _cfg(), xi, eps).loss_d
    assert again < first


def test_identical_distributions_give_zero_mean_wasserstein():
    critic = gan.Critic([8, 4], np.random.default_rng(5), d_in=2)
    gen = LinearGenerator(np.eye(2))
    vals = []
    for k in range(300):
        r = stream(7, f"w/{k}")
        out = gan.critic_step(critic, gen, r.normal(size=(16, 2)), GradRecorder(critic.params), _cfg(),
                              r.normal(size=(16, 2)), r.random(16))
        vals.append(out.wasserstein)
    vals = np.array(vals)
    assert abs(vals.mean()) < 4 * vals.std() / np.sqrt(len(vals))


def test_generator_step_constant_critic_gives_zero_gradient():
    rng = np.random.default_rng(6)
    critic = gan.Critic([4, 3], rng, d_in=2)
    for t in critic.params.values():
        t.data[...] = 0.0
    critic.params["l2.b"].data[...] = 3.0
    gen = LinearGenerator(rng.normal(size=(3, 2)))
    rec = GradRecorder(gen.params)
    gan.generator_step(critic, gen, rec, rng.normal(size=(8, 3)))
    assert not np.any(rec.grads[0])


def test_generator_gradient_with_linear_critic_is_analytic():
    rng = np.random.default_rng(7)
    w = np.array([0.3, -1.2])
    gen = LinearGenerator(rng.normal(size=(2, 2)))
    xi = rng.normal(size=(10, 2))
    rec = GradRecorder(gen.params)
    gan.generator_step(LinearCritic(w), gen, rec, xi)
    # L_G = -mean_i xi_i A w  =>  dL/dA = -mean(xi) outer w
    np.testing.assert_allclose(rec.grads[0], -np.outer(xi.mean(0), w), atol=1e-15)


def test_quantum_generator_gradient_path_matches_fd():
    rng = np.random.default_rng(8)
    gen = gan.QuantumGenerator(quantum.CircuitSpec(4, 2), rng)
    gen.params["b"].data[...] = 0.3 * rng.normal(size=gen.params["b"].shape)
    critic = gan.Critic([6, 4], rng, d_in=8)
    xi = rng.normal(size=(3, 4))
    rec = GradRecorder(gen.params)
    gan.generator_step(critic, gen, rec, xi)
    for name, g in zip(rec.names, rec.grads):
        p = gen.params[name]

        def loss(v):
            old = p.data.copy()
            p.data[...] = v
            out = -critic.score(gen.generate(xi)).numpy().mean()
            p.data[...] = old
            return out

        assert rel_err(g, central_fd(loss, p.data.copy())) < 1e-5


def test_steps_freeze_the_other_network():
    rng = np.random.default_rng(9)
    gen = gan.QuantumGenerator(quantum.CircuitSpec(4, 1), rng)
    critic = gan.Critic([6, 4], rng, d_in=8)
    cfg = _cfg()
    opt_d = gan.Adam(critic.params, 1e-2, (0.5, 0.999), clip=5.0)
    opt_g = gan.Adam(gen.params, 1e-2, (0.5, 0.999), clip=5.0)
    g_before = {k: v.data.copy() for k, v in gen.params.items()}
    gan.critic_step(critic, gen, rng.uniform(-1, 1, (8, 8)), opt_d, cfg, rng.normal(size=(8, 4)), rng.random(8))
    for k, v in gen.params.items():
        assert v.data.tobytes() == g_before[k].tobytes()
    c_before = {k: v.data.copy() for k, v in critic.params.items()}
    gan.generator_step(critic, gen, opt_g, rng.normal(size=(8, 4)))
    for k, v in critic.params.items():
        assert v.data.tobytes() == c_before[k].tobytes()
    assert any(not np.array_equal(v.data, g_before[k]) for k, v in gen.params.items())


def test_nan_critic_loss_aborts():
    rng = np.random.default_rng(10)
    critic = gan.Critic([4, 3], rng, d_in=2)
    critic.params["l2.b"].data[...] = np.nan
    with pytest.raises(NumericalError):
        gan.critic_step(critic, LinearGenerator(np.eye(2)), rng.normal(size=(4, 2)), GradRecorder(critic.params),
                        _cfg(), rng.normal(size=(4, 2)), rng.random(4))


def test_config_validation():
    for bad in (dict(n_critic=0), dict(n_gen=0), dict(lambda_gp=-1.0), dict(batch=1), dict(generator="x")):
        with pytest.raises(ConfigError):
            gan.GanTrainConfig(**bad)


def _toy_run(cfg, run_dir=None, should_stop=None, n_critic_seed=0):
    spec = quantum.CircuitSpec(4, 1)
    gen = gan.QuantumGenerator(spec, stream(cfg.seed, "init/qgen"))
    critic = gan.Critic([8, 4], stream(cfg.seed, "init/critic"), d_in=8)
    real = gan.latent_mixture(64, cfg.seed, d_z=8)
    ev = gan.Evaluator(gan.latent_mixture(64, cfg.seed + 1, d_z=8))
    return gan.train(cfg, gen, critic, real, ev, run_dir=run_dir, should_stop=should_stop)


@pytest.mark.parametrize("n_critic,n_gen", [(5, 1), (3, 2)])
def test_update_cadence_over_100_steps(n_critic, n_gen):
    res = _toy_run(_cfg(max_steps=100, n_critic=n_critic, n_gen=n_gen, eval_interval=50))
    assert res.generator_updates == 100 * n_gen
    assert res.critic_updates == 100 * n_critic
    assert [r.step for r in res.steps] == list(range(1, 101))
    assert all(r.gp >= 0 for r in res.steps)


def test_seed_identical_runs_have_identical_records(tmp_path):
    a = _toy_run(_cfg(max_steps=20), tmp_path / "a")
    b = _toy_run(_cfg(max_steps=20), tmp_path / "b")
    assert [r.row() for r in a.steps] == [r.row() for r in b.steps]
    assert (tmp_path / "a" / "steps.csv").read_bytes() == (tmp_path / "b" / "steps.csv").read_bytes()
    assert (tmp_path / "a" / "evals.csv").read_bytes() == (tmp_path / "b" / "evals.csv").read_bytes()
    c = _toy_run(_cfg(max_steps=20, seed=7), tmp_path / "c")
    assert [r.row() for r in a.steps] != [r.row() for r in c.steps]


def test_resume_is_bit_exact(tmp_path):
    full = tmp_path / "full"
    _toy_run(_cfg(max_steps=20), full)
    part = tmp_path / "part"
    calls = {"n": 0}

    def stop():
        calls["n"] += 1
        return calls["n"] == 10

    _toy_run(_cfg(max_steps=20), part, should_stop=stop)
    assert len(gan.read_steps(part / "steps.csv")) == 10
    res = _toy_run(_cfg(max_steps=20), part)
    assert res.last_step == 20
    assert (full / "steps.csv").read_bytes() == (part / "steps.csv").read_bytes()
    assert (full / "evals.csv").read_bytes() == (part / "evals.csv").read_bytes()


def test_latent_mixture_range_and_determinism():
    a = gan.latent_mixture(100, 3)
    assert a.shape == (100, 24) and np.all(np.abs(a) <= 1)
    np.testing.assert_array_equal(a, gan.latent_mixture(100, 3))
