"""Adam with bias correction over :class:`ModelWeights` tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelWeights


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 10
    clip_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class AdamState:
    m: ModelWeights
    v: ModelWeights
    step: int = 0

    @classmethod
    def for_weights(cls, w: ModelWeights) -> "AdamState":
        return cls(w.zeros_like(), w.zeros_like())


def adam_step(weights: ModelWeights, grads: ModelWeights, state: AdamState,
              cfg: TrainConfig) -> tuple[ModelWeights, AdamState]:
    """One Adam update; returns new weights and state, inputs are left untouched."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step + 1
    scale = 1.0
    if cfg.clip_grad_norm is not None:
        norm = grads.global_norm()
        if norm > cfg.clip_grad_norm:
            scale = cfg.clip_grad_norm / norm
    new_w, new_m, new_v = {}, {}, {}
    for name, w in weights.items():
        g = grads[name] * scale
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_w[name] = w - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    c = weights.config
    return ModelWeights(c, new_w), AdamState(ModelWeights(c, new_m), ModelWeights(c, new_v), t)
