"""Classical networks: dense generator/critic and the convolutional autoencoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from lqgan.autodiff import (
    Adam,
    Tensor,
    batch_norm,
    conv2d,
    conv_transpose2d,
    dropout,
    grad,
    lecun_normal,
    linear,
    mse,
    no_grad,
)
from lqgan.autodiff.tensor import conv_out_size
from lqgan.errors import DataError, ShapeError

log = logging.getLogger(__name__)


class Module:
    """Ordered named parameters plus non-trainable buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_blocks(self, prefix: str) -> dict[str, np.ndarray]:
        out = {prefix + k: p.data for k, p in self.params.items()}
        out.update({prefix + k: v for k, v in self.buffers.items()})
        return out

    def load_blocks(self, blocks: dict[str, np.ndarray], prefix: str) -> None:
        for k, p in self.params.items():
            arr = blocks[prefix + k]
            if arr.shape != p.shape:
                raise ShapeError("checkpoint block shape mismatch", block=prefix + k, expected=list(p.shape),
                                 got=list(arr.shape))
            p.data = np.array(arr, dtype=p.dtype)
        for k, v in self.buffers.items():
            self.buffers[k] = np.array(blocks[prefix + k], dtype=v.dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}


# ---------------------------------------------------------------------------
# Dense networks


@dataclass
class MlpConfig:
    d_in: int
    hidden: tuple[int, int]
    d_out: int
    output_activation: str = "none"  # "tanh" | "none"
    hidden_activation: str = "leaky_relu"  # "leaky_relu" | "relu"
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) != 2:
            raise ShapeError("dense nets here have exactly two hidden layers", hidden=list(self.hidden))
        if self.output_activation not in ("tanh", "none"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation not in ("leaky_relu", "relu"):
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")

    @classmethod
    def critic(cls, hidden: Sequence[int], d_in: int = 24) -> "MlpConfig":
        return cls(d_in, tuple(hidden), 1, "none", "leaky_relu")

    @classmethod
    def generator(cls, hidden: Sequence[int], d_noise: int = 10, d_out: int = 24) -> "MlpConfig":
        return cls(d_noise, tuple(hidden), d_out, "tanh", "relu")


def mlp_param_count(cfg: MlpConfig) -> int:
    n1, n2 = cfg.hidden
    return (cfg.d_in + 1) * n1 + (n1 + 1) * n2 + (n2 + 1) * cfg.d_out


class Mlp(Module):
    def __init__(self, cfg: MlpConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.d_in, *cfg.hidden, cfg.d_out]
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            self.add_param(f"l{i}.W", lecun_normal((fi, fo), fi, rng, dtype))
            self.add_param(f"l{i}.b", np.zeros(fo, dtype=dtype))

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.params["l0.W"].dtype))
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise ShapeError("dense net input shape mismatch", expected=["batch", self.cfg.d_in], got=list(x.shape))
        h = x
        for i in range(3):
            h = linear(h, self.params[f"l{i}.W"], self.params[f"l{i}.b"])
            if i < 2:
                h = h.leaky_relu(self.cfg.leaky_slope) if self.cfg.hidden_activation == "leaky_relu" else h.relu()
        if self.cfg.output_activation == "tanh":
            h = h.tanh()
        return h


def critic_forward(critic: Mlp, z) -> Tensor:
    """One real score per latent vector, shape (batch,)."""
    out = critic(z)
    return out.reshape(out.shape[0])


def classical_generate(generator: Mlp, xi) -> Tensor:
    """Latent vectors in [-1, 1] from noise; the noise feeds the first layer only."""
    return generator(xi)


# ---------------------------------------------------------------------------
# Autoencoder


@dataclass
class AeConfig:
    height: int = 28
    width: int = 28
    channels: int = 3
    conv_channels: tuple[int, int] = (64, 128)
    fc_width: int = 1024
    d_z: int = 24
    dropout: float = 0.0
    batchnorm: bool = True
    kernel: int = 4
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for _ in range(2):
            h = conv_out_size(h, self.kernel, self.stride, self.padding)
            w = conv_out_size(w, self.kernel, self.stride, self.padding)
        return h, w

    @property
    def flat_dim(self) -> int:
        h, w = self.feature_hw
        return self.conv_channels[1] * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


class Autoencoder(Module):
    """conv-BN-conv-BN encoder with two dense layers and a tanh latent; mirrored decoder.

    Images are (batch, H, W, C) with pixels in [0, 1].
    """

    def __init__(self, cfg: AeConfig, rng: np.random.Generator, dtype=np.float64,
                 dropout_rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.training = True
        self.dtype = dtype
        k = cfg.kernel
        c0, (c1, c2) = cfg.channels, cfg.conv_channels
        fh, fw = cfg.feature_hw
        if (fh - 1) * cfg.stride - 2 * cfg.padding + k != conv_out_size(cfg.height, k, cfg.stride, cfg.padding):
            raise ShapeError("conv geometry does not invert", config=cfg.to_dict())
        p = self.add_param
        p("enc.conv1.W", lecun_normal((c1, c0, k, k), c0 * k * k, rng, dtype))
        p("enc.conv1.b", np.zeros(c1, dtype))
        p("enc.conv2.W", lecun_normal((c2, c1, k, k), c1 * k * k, rng, dtype))
        p("enc.conv2.b", np.zeros(c2, dtype))
        p("enc.fc1.W", lecun_normal((cfg.flat_dim, cfg.fc_width), cfg.flat_dim, rng, dtype))
        p("enc.fc1.b", np.zeros(cfg.fc_width, dtype))
        p("enc.fc2.W", lecun_normal((cfg.fc_width, cfg.d_z), cfg.fc_width, rng, dtype))
        p("enc.fc2.b", np.zeros(cfg.d_z, dtype))
        p("dec.fc1.W", lecun_normal((cfg.d_z, cfg.fc_width), cfg.d_z, rng, dtype))
        p("dec.fc1.b", np.zeros(cfg.fc_width, dtype))
        p("dec.fc2.W", lecun_normal((cfg.fc_width, cfg.flat_dim), cfg.fc_width, rng, dtype))
        p("dec.fc2.b", np.zeros(cfg.flat_dim, dtype))
        p("dec.deconv1.W", lecun_normal((c2, c1, k, k), c2 * k * k, rng, dtype))
        p("dec.deconv1.b", np.zeros(c1, dtype))
        p("dec.deconv2.W", lecun_normal((c1, c0, k, k), c1 * k * k, rng, dtype))
        p("dec.deconv2.b", np.zeros(c0, dtype))
        if cfg.batchnorm:
            for name, c in (("enc.bn1", c1), ("enc.bn2", c2), ("dec.bn0", c2), ("dec.bn1", c1)):
                p(name + ".gamma", np.ones(c, dtype))
                p(name + ".beta", np.zeros(c, dtype))
                self.buffers[name + ".mean"] = np.zeros(c)
                self.buffers[name + ".var"] = np.ones(c)
        self._dropout_rng = dropout_rng if dropout_rng is not None else rng

    def train(self, mode: bool = True) -> "Autoencoder":
        self.training = mode
        return self

    def eval(self) -> "Autoencoder":
        return self.train(False)

    def _bn(self, x: Tensor, name: str) -> Tensor:
        if not self.cfg.batchnorm:
            return x
        return batch_norm(
            x,
            self.params[name + ".gamma"],
            self.params[name + ".beta"],
            self.buffers[name + ".mean"],
            self.buffers[name + ".var"],
            self.training,
        )

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.cfg.dropout, self._dropout_rng, self.training)

    def _check_images(self, images) -> Tensor:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
            raise DataError(
                "image batch has wrong dimensions",
                expected=[cfg.height, cfg.width, cfg.channels],
                got=list(images.shape[1:]),
            )
        return images

    def encode(self, images) -> Tensor:
        cfg, P = self.cfg, self.params
        x = self._check_images(images).transpose(0, 3, 1, 2)
        s, pd = cfg.stride, cfg.padding
        h = conv2d(x, P["enc.conv1.W"], P["enc.conv1.b"], s, pd)
        h = self._drop(self._bn(h, "enc.bn1").relu())
        h = conv2d(h, P["enc.conv2.W"], P["enc.conv2.b"], s, pd)
        h = self._drop(self._bn(h, "enc.bn2").relu())
        h = h.reshape(h.shape[0], cfg.flat_dim)
        h = self._drop(linear(h, P["enc.fc1.W"], P["enc.fc1.b"]).relu())
        return linear(h, P["enc.fc2.W"], P["enc.fc2.b"]).tanh()

    def decode(self, z) -> Tensor:
        cfg, P = self.cfg, self.params
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=self.dtype))
        if z.ndim != 2 or z.shape[1] != cfg.d_z:
            raise ShapeError("latent batch shape mismatch", expected=["batch", cfg.d_z], got=list(z.shape))
        s, pd = cfg.stride, cfg.padding
        fh, fw = cfg.feature_hw
        h = self._drop(linear(z, P["dec.fc1.W"], P["dec.fc1.b"]).relu())
        h = linear(h, P["dec.fc2.W"], P["dec.fc2.b"]).relu()
        h = h.reshape(h.shape[0], cfg.conv_channels[1], fh, fw)
        h = self._bn(h, "dec.bn0")
        h = conv_transpose2d(h, P["dec.deconv1.W"], P["dec.deconv1.b"], s, pd)
        h = self._drop(self._bn(h, "dec.bn1").relu())
        h = conv_transpose2d(h, P["dec.deconv2.W"], P["dec.deconv2.b"], s, pd)
        return h.sigmoid().transpose(0, 2, 3, 1)

    def __call__(self, images) -> Tensor:
        return self.decode(self.encode(images))

    def encode_array(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Eval-mode encoding without graph construction, in fixed-size chunks."""
        return self._chunked(self.encode, images, batch)

    def decode_array(self, z: np.ndarray, batch: int = 256) -> np.ndarray:
        return self._chunked(self.decode, z, batch)

    def reconstruct_array(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        return self._chunked(self.__call__, images, batch)

    def _chunked(self, fn: Callable, arr: np.ndarray, batch: int) -> np.ndarray:
        mode = self.training
        self.eval()
        try:
            with no_grad():
                parts = [fn(np.asarray(arr[i : i + batch], dtype=self.dtype)).data for i in range(0, len(arr), batch)]
        finally:
            self.train(mode)
        return np.concatenate(parts, axis=0)


@dataclass
class AeHyper:
    epochs: int = 100
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch: int = 12


@dataclass
class AeHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    rfid: list[float] = field(default_factory=list)


def train_ae(
    ae: Autoencoder,
    train_images: np.ndarray,
    hyper: AeHyper,
    seed: int,
    val_images: np.ndarray | None = None,
    rfid_fn: Callable[[Autoencoder, np.ndarray], float] | None = None,
    on_epoch: Callable[[int, AeHistory], None] | None = None,
) -> AeHistory:
    """Minimize reconstruction MSE with Adam.

    ``train_mse`` records the mean batch loss of each epoch; validation MSE and
    rFID (if ``rfid_fn`` is given) are evaluated on ``val_images`` after each
    epoch.
    """
    from lqgan.data import epoch_batches

    if len(train_images) == 0:
        raise DataError("cannot train an autoencoder on an empty dataset")
    opt = Adam(ae.params, lr=hyper.lr, betas=(hyper.beta1, hyper.beta2), weight_decay=hyper.weight_decay)
    history = AeHistory()
    names = list(ae.params)
    plist = [ae.params[n] for n in names]
    for epoch in range(hyper.epochs):
        ae.train()
        losses = []
        for idx in epoch_batches(len(train_images), hyper.batch, seed, epoch):
            x = np.asarray(train_images[idx], dtype=ae.dtype)
            loss = mse(ae(x), x)
            grads = grad(loss, plist)
            opt.step([g.data for g in grads])
            losses.append(loss.item())
        history.train_mse.append(float(np.mean(losses)))
        if val_images is not None and len(val_images):
            recon = ae.reconstruct_array(val_images)
            history.val_mse.append(float(np.mean((recon - val_images) ** 2)))
            if rfid_fn is not None:
                history.rfid.append(float(rfid_fn(ae, val_images)))
        log.info("ae epoch %d train_mse=%.6g", epoch, history.train_mse[-1])
        if on_epoch is not None:
            on_epoch(epoch, history)
    ae.eval()
    return history


def iter_params(modules: Iterable[Module]) -> Iterable[Tensor]:
    for m in modules:
        yield from m.params.values()
