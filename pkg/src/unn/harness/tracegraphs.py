"""Small random graphs of every architecture family, for energy-trace checks."""

from __future__ import annotations

import numpy as np

from ..energy import Bilinear, FactorGraph, Schedule, randomized_schedule, run_schedule
from ..models import attention as A
from ..models import conv as C
from ..models import mlp as M
from ..models import parser as P
from ..tensor import Tensor

KINDS = ["identity", "relu", "sigmoid", "tanh", "softmax"]


def pairwise_graph(rng: np.random.Generator, k: int):
    """A random tree of 3 to 5 vector variables joined by bilinear factors."""
    n_vars = int(rng.integers(3, 6))
    g = FactorGraph()
    names = [f"V{i}" for i in range(n_vars)]
    dims = rng.integers(1, 5, size=n_vars)
    for i, name in enumerate(names):
        observed = i == 0 and rng.random() < 0.5
        value = Tensor(rng.normal(size=dims[i])) if observed else None
        g.add_variable(name, (int(dims[i]),), "identity" if observed else rng.choice(KINDS),
                       bias=rng.normal(size=dims[i]), observed=observed, value=value)
    for i in range(1, n_vars):
        j = int(rng.integers(0, i))
        w = Tensor(rng.normal(0.0, 1.0, (dims[i], dims[j])))
        g.add_factor(Bilinear(names[i], names[j], w))
    free = [n for n in names if not g.variables[n].observed]
    rounds = [randomized_schedule(free, rng) for _ in range(k)]
    return g, Schedule(rounds[0], k, rounds=rounds)


def mlp_case(rng, k):
    p = M.MlpUnnParams.init(5, 7, 4, rng)
    return M.mlp_graph(p, rng.normal(size=(3, 5))), Schedule(["H", "Y"], k)


def conv_case(rng, k):
    p = C.ConvUnnParams.init(rng, image_size=8, channels=(2, 3), kernels=(3, 2), n_classes=4)
    if rng.random() < 0.5:
        x = Tensor(rng.uniform(-1, 1, (2, 1, 8, 8)))
        return C.conv_graph(p, 2, (8, 8), x=x), Schedule(C.FORWARD_ORDER, k)
    y = Tensor(C.one_hot(rng.integers(0, 4, size=2), 4))
    return C.conv_graph(p, 2, (8, 8), y=y), Schedule(C.GENERATE_ORDER, k)


def attention_case(rng, k, schedule="forward_backward"):
    # small weights keep the joint quadratic form bounded below
    p = A.AttentionUnnParams.init(10, 6, rng, weight_scale=0.25)
    n = int(rng.integers(2, 7))
    tokens = rng.integers(1, 10, size=(2, n))
    mask = rng.random((2, n)) < 0.3
    return A.attention_graph(p, tokens, mask), A.make_schedule(schedule, k, rng)


def parser_case(rng, k):
    p = P.ParserUnnParams.init(12, rng, d=6, r=5)
    n = int(rng.integers(1, 6))
    return P.parser_graph(p, rng.integers(0, 12, size=(2, n))), Schedule(P.ORDER, k)


FAMILIES = {
    "pairwise": pairwise_graph,
    "mlp": mlp_case,
    "conv": conv_case,
    "attention": attention_case,
    "parser": parser_case,
}


def random_traced_run(family: str, rng: np.random.Generator, k: int = 3, init: str = "zero", schedule=None):
    """Energy after initialization and after every update, plus the update count."""
    if family == "attention" and schedule is not None:
        g, s = attention_case(rng, k, schedule)
    else:
        g, s = FAMILIES[family](rng, k)
    s.init = init
    res = run_schedule(g, s, rng, trace=True)
    return res.energy_trace, len(res.updates)
