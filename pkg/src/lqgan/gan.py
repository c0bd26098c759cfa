"""WGAN-GP training in latent space with quantum or classical generators.

One training step consumes one batch of real latents and performs
``n_critic`` critic updates followed by ``n_gen`` generator updates.
Random numbers for a step come from streams keyed by the step index, so a
run resumed from a checkpoint continues exactly as the uninterrupted run
would have.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from lqgan import quantum
from lqgan.autodiff import Adam, Function, Tensor, grad, lecun_normal, load_checkpoint, no_grad, save_checkpoint
from lqgan.data import epoch_batches
from lqgan.errors import ConfigError, DataError, NumericalError, ShapeError
from lqgan.metrics import PixelFlatten, fid as fid_metric, jsd
from lqgan.nets import Mlp, MlpConfig, Module, critic_forward
from lqgan.rng import stream

log = logging.getLogger(__name__)

STEPS_HEADER = ["step", "loss_d", "loss_g", "wasserstein", "gp"]
EVALS_HEADER = ["step", "fid", "jsd_raw", "jsd_feat"]


@dataclass
class GanTrainConfig:
    n_critic: int = 5
    n_gen: int = 1
    lambda_gp: float = 1.0
    epochs: int = 10000
    max_steps: int | None = None
    batch: int = 256
    lr_g: float = 0.0005
    lr_d: float = 0.0008
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 0.0
    clip: float | None = 5.0
    eval_interval: int = 100
    eval_cohort: int = 2000
    checkpoint_interval: int | None = None
    generator: str = "quantum"
    seed: int = 42
    # Early stop once the feature JSD is below this value and the FID
    # series reads "stable"; None trains for the full budget.
    stop_jsd: float | None = None
    window: int = 20
    tau_sigma: float = 0.05
    tau_min: float = 0.10
    burn_in: int = 2000

    def __post_init__(self):
        if self.n_critic < 1 or self.n_gen < 1:
            raise ConfigError("n_critic and n_gen must be at least 1", n_critic=self.n_critic, n_gen=self.n_gen)
        if self.lambda_gp < 0:
            raise ConfigError("lambda_gp must be non-negative", lambda_gp=self.lambda_gp)
        if self.batch < 2:
            raise ConfigError("batch must be at least 2 so interpolation has pairs", batch=self.batch)
        if self.generator not in ("quantum", "classical"):
            raise ConfigError("generator must be 'quantum' or 'classical'", generator=self.generator)
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive", eval_interval=self.eval_interval)
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip must be positive", clip=self.clip)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    loss_d: float
    loss_g: float
    wasserstein: float
    gp: float

    def row(self) -> list[str]:
        return [str(self.step), repr(self.loss_d), repr(self.loss_g), repr(self.wasserstein), repr(self.gp)]


# ---------------------------------------------------------------------------
# Generators and critic


class Generator(Protocol):
    noise_dim: int
    latent_dim: int
    prefix: str
    params: dict[str, Tensor]

    def forward(self, xi: np.ndarray) -> Tensor: ...

    def generate(self, xi: np.ndarray) -> np.ndarray: ...


class _QuantumLatent(Function):
    """Latents of the style circuit as a differentiable function of (W, b).

    The forward pass keeps the final states so the backward pass runs the
    adjoint sweep without re-simulating.
    """

    def forward(self, W, b):
        params = quantum.StyleParams(self.spec, W, b)
        angles = quantum.angles_from_noise(params, self.xi)
        self.fw = quantum.simulate(self.spec, angles, keep_states=True)
        self.params = params
        return self.fw[0]

    def backward(self, g):
        dW, db = quantum.latent_vjp(self.params, self.xi, g.data, forward=self.fw)
        self.fw = None
        return Tensor(dW), Tensor(db)


class QuantumGenerator(Module):
    prefix = "qgen."

    def __init__(self, spec: quantum.CircuitSpec, rng: np.random.Generator | None = None, init_scale: float = 1.0):
        super().__init__()
        self.spec = spec
        self.noise_dim = spec.num_qubits
        self.latent_dim = spec.latent_dim
        shape = (spec.num_boxes, quantum.ANGLES_PER_BOX)
        # Lecun normal with fan_in taken from the second-to-last axis (the box
        # slots), the usual convention for a (slots, angles) weight tensor
        w = init_scale * lecun_normal(shape, shape[0], rng) if rng is not None else np.zeros(shape)
        self.add_param("W", w)
        self.add_param("b", np.zeros(shape))

    @property
    def style(self) -> quantum.StyleParams:
        return quantum.StyleParams(self.spec, self.params["W"].data, self.params["b"].data)

    def forward(self, xi) -> Tensor:
        xi = np.asarray(xi, dtype=np.float64)
        return _QuantumLatent.apply(self.params["W"], self.params["b"], spec=self.spec, xi=xi)

    def generate(self, xi) -> np.ndarray:
        return quantum.generate_latent(self.style, np.asarray(xi, dtype=np.float64))

    def state_blocks(self, prefix: str | None = None) -> dict[str, np.ndarray]:
        return self.style.to_blocks(prefix or self.prefix)

    def load_blocks(self, blocks, prefix: str | None = None) -> None:
        sp = quantum.StyleParams.from_blocks(blocks, prefix or self.prefix)
        if sp.spec != self.spec:
            raise ShapeError("checkpoint circuit does not match", expected=[self.spec.num_qubits, self.spec.num_layers],
                             got=[sp.spec.num_qubits, sp.spec.num_layers])
        self.params["W"].data = sp.W
        self.params["b"].data = sp.b

    def describe(self) -> dict:
        return {"kind": "quantum", "qubits": self.spec.num_qubits, "layers": self.spec.num_layers,
                "params": self.num_params}


class ClassicalGenerator(Mlp):
    prefix = "cgen."

    def __init__(self, hidden, rng: np.random.Generator, d_noise: int = 10, d_out: int = 24,
                 hidden_activation: str = "relu"):
        cfg = MlpConfig.generator(hidden, d_noise, d_out)
        cfg.hidden_activation = hidden_activation
        super().__init__(cfg, rng)
        self.noise_dim = d_noise
        self.latent_dim = d_out

    def forward(self, xi) -> Tensor:
        return self(np.asarray(xi, dtype=np.float64))

    def generate(self, xi) -> np.ndarray:
        with no_grad():
            return self(np.asarray(xi, dtype=np.float64)).data

    def state_blocks(self, prefix: str | None = None):
        return super().state_blocks(prefix or self.prefix)

    def load_blocks(self, blocks, prefix: str | None = None) -> None:
        super().load_blocks(blocks, prefix or self.prefix)

    def describe(self) -> dict:
        return {"kind": "classical", "hidden": list(self.cfg.hidden), "d_noise": self.noise_dim,
                "params": self.num_params}


class Critic(Mlp):
    prefix = "critic."

    def __init__(self, hidden, rng: np.random.Generator, d_in: int = 24, hidden_activation: str = "leaky_relu",
                 leaky_slope: float = 0.2):
        cfg = MlpConfig.critic(hidden, d_in)
        cfg.hidden_activation = hidden_activation
        cfg.leaky_slope = leaky_slope
        super().__init__(cfg, rng)

    def score(self, z) -> Tensor:
        return critic_forward(self, z)

    def describe(self) -> dict:
        return {"hidden": list(self.cfg.hidden), "params": self.num_params}


def _scores(critic, z) -> Tensor:
    out = critic.score(z) if hasattr(critic, "score") else critic(z)
    if not isinstance(out, Tensor):
        raise ShapeError("critic must return a Tensor")
    return out.reshape(out.shape[0]) if out.ndim > 1 else out


# ---------------------------------------------------------------------------
# Loss pieces


def gradient_penalty(critic, z_real, z_fake, rng: np.random.Generator | None = None, eps=None) -> Tensor:
    """Mean of (||grad_z D(z_hat)|| - 1)^2 over real/fake interpolates.

    One interpolation weight per pair. The result stays differentiable with
    respect to the critic parameters.
    """
    zr = z_real.data if isinstance(z_real, Tensor) else np.asarray(z_real, dtype=np.float64)
    zf = z_fake.data if isinstance(z_fake, Tensor) else np.asarray(z_fake, dtype=np.float64)
    if zr.shape != zf.shape:
        raise ShapeError("real and fake batches differ", real=list(zr.shape), fake=list(zf.shape))
    if eps is None:
        eps = rng.random(zr.shape[0])
    eps = np.asarray(eps, dtype=np.float64).reshape(-1, 1)
    z_hat = Tensor(eps * zr + (1.0 - eps) * zf, requires_grad=True)
    d = _scores(critic, z_hat)
    (g,) = grad(d.sum(), [z_hat], create_graph=True)
    return ((g.norm(axis=1) - 1.0) ** 2).mean()


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"{what} is not finite", step=step, value=repr(value))


@dataclass
class CriticOut:
    loss_d: float
    wasserstein: float
    gp: float


def critic_step(critic, generator, z_real: np.ndarray, opt: Adam, cfg: GanTrainConfig,
                xi: np.ndarray, eps: np.ndarray, step: int = 0) -> CriticOut:
    """One critic update on L_D = E[D(fake)] - E[D(real)] + lambda * GP.

    The generator is only evaluated, never differentiated.
    """
    z_fake = generator.generate(xi)
    d_real = _scores(critic, z_real)
    d_fake = _scores(critic, z_fake)
    w = d_fake.mean() - d_real.mean()
    if cfg.lambda_gp > 0:
        gp = gradient_penalty(critic, z_real, z_fake, eps=eps)
        loss = w + gp * cfg.lambda_gp
        gp_val = gp.item()
    else:
        loss = w
        gp_val = 0.0
    _check_finite(loss.item(), "critic loss", step)
    names = opt.names
    grads = grad(loss, [critic.params[n] for n in names])
    opt.step([g.data for g in grads])
    return CriticOut(loss.item(), w.item(), gp_val)


def generator_step(critic, generator, opt: Adam, xi: np.ndarray, step: int = 0) -> float:
    """One generator update on L_G = -E[D(G(xi))]; critic weights are left untouched."""
    z = generator.forward(xi)
    loss = -_scores(critic, z).mean()
    _check_finite(loss.item(), "generator loss", step)
    grads = grad(loss, [generator.params[n] for n in opt.names])
    opt.step([g.data for g in grads])
    return loss.item()


# ---------------------------------------------------------------------------
# Synthetic latent target


def latent_mixture(n: int, seed: int, d_z: int = 24, components: int = 4, spread: float = 0.08,
                   radius: float = 0.7, target_seed: int = 0) -> np.ndarray:
    """Samples from a fixed Gaussian mixture in [-1, 1]^d_z.

    The mixture itself (centers) depends only on ``target_seed``; ``seed``
    selects which samples are drawn. Coordinate q and q + d_z/2 together
    stay inside a disc of the given radius, so the target is compatible
    with the Bloch-ball constraint <X>^2 + <Z>^2 <= 1 of a single qubit.
    """
    if d_z % 2:
        raise ShapeError("latent dimension must be even", d_z=d_z)
    half = d_z // 2
    crng = stream(target_seed, "toy/centers")
    r = radius * np.sqrt(crng.random((components, half)))
    phi = crng.random((components, half)) * 2.0 * np.pi
    centers = np.concatenate([r * np.cos(phi), r * np.sin(phi)], axis=1)
    srng = stream(seed, "toy/samples")
    labels = srng.integers(0, components, size=n)
    z = centers[labels] + spread * srng.standard_normal((n, d_z))
    return np.clip(z, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class Evaluator:
    """Scores a fixed cohort of generated latents against reference data.

    With a decoder and reference images, FID and raw JSD are computed on
    decoded images through ``extractor``; without them, FID uses the latents
    themselves and raw JSD is reported as NaN.
    """

    reference_latents: np.ndarray
    decoder: Callable[[np.ndarray], np.ndarray] | None = None
    reference_images: np.ndarray | None = None
    extractor: object = None
    bins: int = 64

    def __call__(self, fake_latents: np.ndarray) -> dict:
        jsd_feat = jsd(self.reference_latents, fake_latents, "feature", self.bins)
        if self.decoder is not None and self.reference_images is not None:
            images = self.decoder(fake_latents)
            res = fid_metric(self.reference_images, images, self.extractor)
            jsd_raw = jsd(self.reference_images, images, "raw", self.bins)
        else:
            res = fid_metric(self.reference_latents, fake_latents, self.extractor or PixelFlatten())
            jsd_raw = float("nan")
        return {"fid": res.value, "jsd_raw": jsd_raw, "jsd_feat": jsd_feat, "under_sampled": res.under_sampled}


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class RunResult:
    steps: list[StepRecord]
    evals: list[dict]
    critic_updates: int
    generator_updates: int
    stopped_early: bool = False
    verdict: dict | None = None
    last_step: int = 0


def _noise(seed: int, step: int, kind: str, k: int, shape) -> np.ndarray:
    return stream(seed, f"gan/{kind}/{step}/{k}").standard_normal(shape)


def _eps(seed: int, step: int, k: int, n: int) -> np.ndarray:
    return stream(seed, f"gan/gp/{step}/{k}").random(n)


def eval_noise(seed: int, n: int, dim: int) -> np.ndarray:
    """The fixed noise cohort used for every evaluation of a run."""
    return stream(seed, "gan/eval-cohort").standard_normal((n, dim))


def _opt_blocks(prefix: str, opt: Adam) -> dict[str, np.ndarray]:
    out = {f"{prefix}step": np.array([opt.state.step_count, opt.applied], dtype=np.float64)}
    for name, m, v in zip(opt.names, opt.state.first_moment, opt.state.second_moment):
        out[f"{prefix}m.{name}"] = m
        out[f"{prefix}v.{name}"] = v
    return out


def _load_opt(prefix: str, opt: Adam, blocks) -> None:
    sc, applied = blocks[f"{prefix}step"]
    opt.state.step_count = int(sc)
    opt.applied = int(applied)
    for i, name in enumerate(opt.names):
        opt.state.first_moment[i][...] = blocks[f"{prefix}m.{name}"]
        opt.state.second_moment[i][...] = blocks[f"{prefix}v.{name}"]


class RunDir:
    """Files of one training run: config.json, steps.csv, evals.csv, checkpoints."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.steps = self.path / "steps.csv"
        self.evals = self.path / "evals.csv"
        self.ckpt = self.path / "checkpoint.lqg"

    def init_csv(self, fresh: bool) -> None:
        for p, header in ((self.steps, STEPS_HEADER), (self.evals, EVALS_HEADER)):
            if fresh or not p.exists():
                with open(p, "w", newline="") as f:
                    csv.writer(f).writerow(header)

    def truncate_to(self, step: int) -> None:
        """Drop CSV rows written after ``step`` (left over from an interrupted run)."""
        for p in (self.steps, self.evals):
            if not p.exists():
                continue
            with open(p, newline="") as f:
                rows = list(csv.reader(f))
            keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step]
            with open(p, "w", newline="") as f:
                csv.writer(f).writerows(keep)

    def append_steps(self, recs: list[StepRecord]) -> None:
        with open(self.steps, "a", newline="") as f:
            w = csv.writer(f)
            for r in recs:
                w.writerow(r.row())

    def append_eval(self, e: dict) -> None:
        with open(self.evals, "a", newline="") as f:
            csv.writer(f).writerow([str(e["step"]), repr(e["fid"]), repr(e["jsd_raw"]), repr(e["jsd_feat"])])


def read_evals(path: str | os.PathLike) -> list[dict]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append({"step": int(row["step"]), "fid": float(row["fid"]), "jsd_raw": float(row["jsd_raw"]),
                        "jsd_feat": float(row["jsd_feat"])})
    return out


def read_steps(path: str | os.PathLike) -> list[StepRecord]:
    with open(path, newline="") as f:
        return [StepRecord(int(r["step"]), float(r["loss_d"]), float(r["loss_g"]), float(r["wasserstein"]),
                           float(r["gp"])) for r in csv.DictReader(f)]


def _verdict(cfg: GanTrainConfig, evals: list[dict]):
    from lqgan.experiments import detect_optimality  # experiments builds on this module

    if len(evals) < 2 * cfg.window:
        return None
    return detect_optimality([e["fid"] for e in evals], [e["step"] for e in evals], window=cfg.window,
                             tau_sigma=cfg.tau_sigma, tau_min=cfg.tau_min, burn_in=cfg.burn_in)


def train(
    cfg: GanTrainConfig,
    generator,
    critic: Critic,
    real_latents: np.ndarray,
    evaluator: Evaluator | None = None,
    run_dir: str | os.PathLike | None = None,
    resume: bool = True,
    on_eval: Callable[[dict], None] | None = None,
    should_stop: Callable[[], bool] | None = None,
) -> RunResult:
    """Adversarial training on a frozen pool of real latents.

    ``real_latents`` are the encoder outputs for the run's data sub-selection
    (the encoder is frozen, so encoding once equals encoding every batch).
    Steps count training steps; each holds ``n_critic`` critic and ``n_gen``
    generator updates.
    """
    real = np.asarray(real_latents, dtype=np.float64)
    if real.ndim != 2 or len(real) == 0:
        raise DataError("real latent pool must be a non-empty (n, d_z) array", shape=list(real.shape))
    if real.shape[1] != generator.latent_dim:
        raise ShapeError("latent dimension mismatch", real=real.shape[1], generator=generator.latent_dim)
    if len(real) < cfg.batch:
        raise DataError("fewer real latents than one batch", n=len(real), batch=cfg.batch)

    opt_d = Adam(critic.params, cfg.lr_d, (cfg.beta1, cfg.beta2), cfg.weight_decay, cfg.clip)
    opt_g = Adam(generator.params, cfg.lr_g, (cfg.beta1, cfg.beta2), cfg.weight_decay, cfg.clip)

    rd = RunDir(run_dir) if run_dir is not None else None
    start = 0
    evals: list[dict] = []
    steps: list[StepRecord] = []
    if rd is not None:
        if resume and rd.ckpt.exists():
            blocks = load_checkpoint(rd.ckpt)
            generator.load_blocks(blocks)
            critic.load_blocks(blocks, Critic.prefix)
            _load_opt("opt_d.", opt_d, blocks)
            _load_opt("opt_g.", opt_g, blocks)
            start = int(blocks["run.step"][0])
            rd.truncate_to(start)
            steps = read_steps(rd.steps)
            evals = read_evals(rd.evals)
            log.info("resumed from step %d", start)
        else:
            rd.init_csv(fresh=True)
        with open(rd.path / "train_config.json", "w") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)

    cohort = eval_noise(cfg.seed, cfg.eval_cohort, generator.noise_dim) if evaluator is not None else None
    n_real = len(real)
    per_epoch = n_real // cfg.batch
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    ckpt_every = cfg.checkpoint_interval or cfg.eval_interval
    pending: list[StepRecord] = []
    result = RunResult(steps, evals, opt_d.applied, opt_g.applied, last_step=start)

    def save(step: int) -> None:
        if rd is None:
            return
        rd.append_steps(pending)
        pending.clear()
        blocks = {"run.step": np.array([step], dtype=np.float64)}
        blocks.update(generator.state_blocks())
        blocks.update(critic.state_blocks(Critic.prefix))
        blocks.update(_opt_blocks("opt_d.", opt_d))
        blocks.update(_opt_blocks("opt_g.", opt_g))
        save_checkpoint(rd.ckpt, blocks)

    step = start
    batches: list[np.ndarray] = []
    while step < total:
        epoch, pos = divmod(step, per_epoch)
        if pos == 0 or not batches:
            batches = epoch_batches(n_real, cfg.batch, cfg.seed, epoch, min_size=cfg.batch)
        z_real = real[batches[pos]]
        step += 1
        for k in range(cfg.n_critic):
            xi = _noise(cfg.seed, step, "critic-noise", k, (cfg.batch, generator.noise_dim))
            co = critic_step(critic, generator, z_real, opt_d, cfg, xi, _eps(cfg.seed, step, k, cfg.batch), step)
        for k in range(cfg.n_gen):
            xi = _noise(cfg.seed, step, "gen-noise", k, (cfg.batch, generator.noise_dim))
            loss_g = generator_step(critic, generator, opt_g, xi, step)
        rec = StepRecord(step, co.loss_d, loss_g, co.wasserstein, co.gp)
        steps.append(rec)
        pending.append(rec)

        stop = False
        if evaluator is not None and step % cfg.eval_interval == 0:
            e = {"step": step, **evaluator(generator.generate(cohort))}
            evals.append(e)
            if rd is not None:
                rd.append_eval(e)
            if on_eval is not None:
                on_eval(e)
            if cfg.stop_jsd is not None and e["jsd_feat"] < cfg.stop_jsd:
                v = _verdict(cfg, evals)
                if v is not None and v.verdict == "stable":
                    result.verdict = v.to_dict()
                    result.stopped_early = stop = True
        if step % ckpt_every == 0 or step == total or stop:
            save(step)
        if stop or (should_stop is not None and should_stop()):
            break

    if pending:
        save(step)
    result.critic_updates = opt_d.applied
    result.generator_updates = opt_g.applied
    result.last_step = step
    if result.verdict is None:
        v = _verdict(cfg, evals)
        result.verdict = v.to_dict() if v is not None else None
    return result
