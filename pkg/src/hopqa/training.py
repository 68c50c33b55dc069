"""Optimizer and schedule: Adam with decoupled weight decay, linear warmup
then linear decay to zero. Deterministic given seeds; everything float64."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderParams, param_tensors
from .errors import NonFiniteLossError

LossBuilder = Callable[[Mapping[str, Tensor], object], Tensor]


@dataclass(frozen=True)
class FitConfig:
    """High-level knobs for a training run; total steps are derived from the
    epoch count and batch layout."""

    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 3e-3
    warmup_steps: int = 5
    weight_decay: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class TrainSchedule:
    peak_lr: float = 1e-3
    warmup_steps: int = 10
    total_steps: int = 100
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")

    def lr_at(self, step: int) -> float:
        """Linear warmup from 0 to peak, then linear decay to 0."""
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        remaining = (self.total_steps - step) / (self.total_steps - self.warmup_steps)
        return self.peak_lr * max(0.0, remaining)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def loss_and_grads(params: EncoderParams, loss_builder: LossBuilder,
                   batch) -> tuple[float, dict[str, np.ndarray]]:
    """Build the loss graph for one batch and backpropagate.

    Returns the scalar loss and a gradient array per parameter name
    (exact zeros for parameters the loss does not reach).
    """
    tensors = param_tensors(params)
    loss = loss_builder(tensors, batch)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss is not finite: {value}")
    loss.backward()
    return value, {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                   for name, t in tensors.items()}


def apply_update(params: EncoderParams, grads: Mapping[str, np.ndarray],
                 state: AdamState, schedule: TrainSchedule) -> None:
    """One AdamW step in place; the learning rate scales the decay term too."""
    lr = schedule.lr_at(state.step)
    state.step += 1
    t = state.step
    for name in sorted(params.arrays):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        update = lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                       + schedule.weight_decay * params.arrays[name])
        if not np.isfinite(update).all():
            raise NonFiniteLossError(f"non-finite update for {name!r} at step {t}")
        params.arrays[name] -= update


def train_step(params: EncoderParams, loss_builder: LossBuilder, batch,
               state: AdamState, schedule: TrainSchedule) -> float:
    """Gradients plus optimizer update for one batch; returns the loss."""
    value, grads = loss_and_grads(params, loss_builder, batch)
    apply_update(params, grads, state, schedule)
    return value
