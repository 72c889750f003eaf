"""Undirected MLP: X - H - Y with relu hidden units and a softmax output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..energy import Bilinear, FactorGraph, Schedule, run_schedule, unroll
from ..tensor import Tensor


@dataclass
class MlpUnnParams:
    W: Tensor  # hidden x in
    V: Tensor  # out x hidden
    b_H: Tensor
    b_Y: Tensor

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        return cls(
            W=Tensor(rng.normal(0, scale / np.sqrt(n_in), (n_hidden, n_in)), requires_grad=True),
            V=Tensor(rng.normal(0, scale / np.sqrt(n_hidden), (n_out, n_hidden)), requires_grad=True),
            b_H=Tensor(rng.normal(0, 0.1 * scale, n_hidden), requires_grad=True),
            b_Y=Tensor(rng.normal(0, 0.1 * scale, n_out), requires_grad=True),
        )

    def tensors(self) -> list[Tensor]:
        return [self.W, self.V, self.b_H, self.b_Y]


def mlp_graph(p: MlpUnnParams, x) -> FactorGraph:
    x = x if isinstance(x, Tensor) else Tensor(x)
    batch = x.shape[:-1]
    g = FactorGraph()
    g.add_variable("X", x.shape, "identity", observed=True, value=x)
    g.add_variable("H", batch + (p.W.shape[0],), "relu", bias=p.b_H)
    g.add_variable("Y", batch + (p.V.shape[0],), "softmax", bias=p.b_Y)
    g.add_factor(Bilinear("H", "X", p.W))
    g.add_factor(Bilinear("Y", "H", p.V))
    return g


def mlp_forward(p: MlpUnnParams, x, k: int = 1, init: str = "zero", rng=None, track: bool = False):
    """Run k rounds of (H, Y) updates; returns Y (a Tensor when ``track``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = mlp_graph(p, x)
    s = Schedule(["H", "Y"], k, init)
    if track:
        return unroll(g, s, rng).values["Y"]
    return run_schedule(g, s, rng).values["Y"]
