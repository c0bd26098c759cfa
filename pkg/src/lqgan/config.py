"""Run configuration: one JSON document covering data, autoencoder, GAN and metrics.

Defaults are the full-scale training hyperparameters. Unknown keys
are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from lqgan.errors import ConfigError

SEED_ENV = "LQG_SEED"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    path: Optional[str] = None
    synth_kind: Literal["gaussian-blobs", "striped-fields"] = "gaussian-blobs"
    size: int = Field(2500, ge=1)
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)


class AeSection(_Strict):
    height: int = 28
    width: int = 28
    channels: int = 3
    conv_channels: list[int] = Field(default_factory=lambda: [64, 128])
    fc_width: int = 1024
    d_z: int = 24
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    batchnorm: bool = True
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    epochs: int = Field(100, ge=0)
    lr: float = Field(0.001, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = Field(0.0, ge=0)
    batch: int = Field(12, ge=1)

    @field_validator("conv_channels")
    @classmethod
    def _two_convs(cls, v):
        if len(v) != 2:
            raise ValueError("exactly two conv channel counts")
        return v


class GeneratorSection(_Strict):
    kind: Literal["quantum", "classical"] = "quantum"
    qubits: int = Field(12, ge=1)
    layers: int = Field(2, ge=1)
    init_scale: float = 1.0
    hidden: list[int] = Field(default_factory=lambda: [50, 25])
    d_noise: int = Field(10, ge=1)
    hidden_activation: Literal["relu", "leaky_relu"] = "relu"


class CriticSection(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [125, 62])
    hidden_activation: Literal["relu", "leaky_relu"] = "leaky_relu"
    leaky_slope: float = 0.2


class GanSection(_Strict):
    n_critic: int = Field(5, ge=1)
    n_gen: int = Field(1, ge=1)
    lambda_gp: float = Field(1.0, ge=0)
    epochs: int = Field(10000, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    batch: int = Field(256, ge=2)
    lr_g: float = Field(0.0005, gt=0)
    lr_d: float = Field(0.0008, gt=0)
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = Field(0.0, ge=0)
    clip: Optional[float] = Field(5.0, gt=0)
    eval_interval: int = Field(100, ge=1)
    eval_cohort: int = Field(2000, ge=2)
    checkpoint_interval: Optional[int] = Field(None, ge=1)
    stop_jsd: Optional[float] = None
    window: int = Field(20, ge=2)
    tau_sigma: float = Field(0.05, gt=0)
    tau_min: float = Field(0.10, ge=0)
    burn_in: int = Field(2000, ge=0)


class MetricsSection(_Strict):
    extractor: Literal["pixel", "random-projection", "ae-encoder"] = "random-projection"
    projection_dim: int = Field(64, ge=1)
    projection_seed: int = 0
    bins: int = Field(64, ge=2)


class ToySection(_Strict):
    """Synthetic latent target used when no autoencoder is given."""

    components: int = Field(4, ge=1)
    spread: float = Field(0.08, gt=0)
    radius: float = Field(0.7, gt=0, le=1.0)
    target_seed: int = 0
    size: int = Field(2500, ge=2)


class RunConfig(_Strict):
    seed: int = 42
    data: DataSection = Field(default_factory=DataSection)
    ae: AeSection = Field(default_factory=AeSection)
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    critic: CriticSection = Field(default_factory=CriticSection)
    gan: GanSection = Field(default_factory=GanSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)
    toy: ToySection = Field(default_factory=ToySection)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def _validate(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        errs = [{"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"]} for e in exc.errors()]
        raise ConfigError("invalid run configuration", errors=errs) from None


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                env: dict | None = None) -> RunConfig:
    """Read a config file (or defaults), then the seed env var, then dotted-key overrides.

    Precedence is command-line flag over ``LQG_SEED`` over the file.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("config file not found", path=str(path)) from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config is not valid JSON", path=str(path), detail=str(exc)) from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object", path=str(path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer", value=env[SEED_ENV]) from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return _validate(raw)
