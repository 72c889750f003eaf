"""Adam with bias correction and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray]) -> list[Tensor]:
    """Apply one Adam update to ``params`` in place and return them."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads)))


def clip_gradients(grads: list[np.ndarray], max_norm: float = 10.0) -> list[np.ndarray]:
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


class Adam:
    """Stateful wrapper used by the training loops."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, clip: float | None = None, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)
        self.clip = clip

    def step(self, grads: dict) -> float:
        """Update from a gradient map; returns the pre-clipping global norm."""
        gs = [grads.get(p, np.zeros_like(p.data)) for p in self.params]
        norm = global_norm(gs)
        if self.clip is not None:
            gs = clip_gradients(gs, self.clip)
        adam_step(self.state, self.params, gs)
        return norm
