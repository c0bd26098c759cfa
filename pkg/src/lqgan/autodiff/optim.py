"""Adam and global-norm gradient clipping on numpy parameter blocks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from lqgan.autodiff.tensor import Tensor
from lqgan.errors import NumericalError, ShapeError


def global_norm(grads: Sequence[np.ndarray]) -> float:
    # fixed left-to-right order keeps the reduction reproducible
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_global_norm(grads: Sequence[np.ndarray], c: float) -> list[np.ndarray]:
    """Rescale ``grads`` jointly by ``min(1, c / ||g||)``.

    The scale is nudged down by ulps until the recomputed norm is <= c, so
    clipping an already clipped set returns it unchanged.
    """
    if c <= 0:
        raise ValueError("clip norm must be positive")
    norm = global_norm(grads)
    if norm <= c or norm == 0.0:
        return [np.array(g, copy=True) for g in grads]
    # g * c / norm rounds each entry once, so hand examples come out exact
    out = [g * np.asarray(c, dtype=g.dtype) / np.asarray(norm, dtype=g.dtype) for g in grads]
    if global_norm(out) <= c:
        return out
    scale = c / norm
    while True:
        out = [g * np.asarray(scale, dtype=g.dtype) for g in grads]
        if global_norm(out) <= c:
            return out
        scale = np.nextafter(scale, 0.0)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        st = cls(**hyper)
        st.first_moment = [np.zeros_like(p) for p in params]
        st.second_moment = [np.zeros_like(p) for p in params]
        return st


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("adam: params/grads/state length mismatch", op="adam_step")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"block{i}"
            raise NumericalError(f"non-finite gradient in parameter block {name!r}", block=name, step=state.step_count)
        if g.shape != params[i].shape:
            raise ShapeError("adam: gradient shape mismatch", op="adam_step", shapes=[list(params[i].shape), list(g.shape)])
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


class Adam:
    """Optimizer bound to a list of named parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0,
                 clip: float | None = None):
        self.names = list(params)
        self.params = [params[n] for n in self.names]
        self.clip = clip
        self.state = AdamState.for_params(
            [p.data for p in self.params], lr=lr, beta1=betas[0], beta2=betas[1], weight_decay=weight_decay
        )
        self.applied = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray] | None = None) -> float:
        """Clip (if configured) and apply. Returns the pre-clip global norm."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = global_norm(grads)
        if self.clip is not None:
            grads = clip_global_norm(grads, self.clip)
        adam_step([p.data for p in self.params], grads, self.state, self.names)
        self.applied += 1
        return norm
