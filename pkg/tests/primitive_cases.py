"""One scalar loss per autodiff primitive, shared by the unit and acceptance suites."""

import numpy as np

from unn.harness.oracles import packed_indicator
from unn.tensor import (
    Tensor,
    clip,
    concatenate,
    conv2d,
    conv2d_transpose,
    exp,
    identity,
    log,
    log_softmax,
    outer,
    permute,
    relu,
    reshape,
    roll_axis,
    roll_axis_last,
    sigmoid,
    softmax,
    swap_last,
    take,
    tanh,
    tensordot,
    where,
)
from unn.trees import marginals_op, tree_nll


def _away_from(x, points, gap=0.05, to=0.1):
    for p in points:
        x = np.where(np.abs(x - p) < gap, to, x)
    return x


def primitive_cases(rng):
    """name -> (loss_fn, params); nonsmooth inputs are moved off their kinks."""
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    vec = Tensor(rng.normal(size=(4,)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 1, 7, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 1, 3, 2)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    big = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    kinked = Tensor(_away_from(rng.normal(size=(3, 4)), [0.0], to=0.3), requires_grad=True)
    clipped = Tensor(_away_from(rng.normal(size=(3, 4)), [-0.5, 0.5]), requires_grad=True)
    scores = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    gold = np.stack([packed_indicator((0, 1, 1, 3)), packed_indicator((2, 0, 2, 2))])
    r = Tensor(rng.normal(size=(3, 4)))
    return {
        "add": (lambda: ((a + b) * r).sum(), [a, b]),
        "sub": (lambda: ((a - b) * r).sum(), [a, b]),
        "mul": (lambda: (a * b).sum(), [a, b]),
        "div": (lambda: (a / pos).sum(), [a, pos]),
        "power": (lambda: (pos**1.7).sum(), [pos]),
        "exp": (lambda: exp(a * 0.5).sum(), [a]),
        "log": (lambda: log(pos).sum(), [pos]),
        "clip": (lambda: (clip(clipped, -0.5, 0.5) * r).sum(), [clipped]),
        "where": (lambda: (where(r.data > 0, a, b) * r).sum(), [a, b]),
        "mean": (lambda: (a * r).mean(), [a]),
        "broadcast": (lambda: ((a + vec) ** 2).sum(), [a, vec]),
        "reshape": (lambda: (reshape(a, (4, 3)) * r.data.reshape(4, 3)).sum(), [a]),
        "permute": (lambda: (permute(big, (2, 0, 1)) ** 2 * 0.5).sum(), [big]),
        "roll_axis": (lambda: (roll_axis(big, 1) * np.arange(24.0).reshape(3, 2, 4)).sum(), [big]),
        "roll_axis_last": (lambda: (roll_axis_last(big, 0) * np.arange(24.0).reshape(3, 4, 2)).sum(), [big]),
        "swap_last": (lambda: (swap_last(big) * np.arange(24.0).reshape(2, 4, 3)).sum(), [big]),
        "take": (lambda: (take(a, (np.array([0, 2, 2]), np.array([1, 1, 3]))) ** 2).sum(), [a]),
        "concatenate": (lambda: (concatenate([a, b], axis=1) ** 2).sum(), [a, b]),
        "matmul": (lambda: tanh(a @ c).sum(), [a, c]),
        "matmul_vector": (lambda: tanh(a @ vec).sum(), [a, vec]),
        "tensordot": (lambda: tanh(tensordot(big, c, 1)).sum(), [big, c]),
        "outer": (lambda: (outer(vec, a) * np.arange(48.0).reshape(4, 3, 4)).sum(), [vec, a]),
        "conv2d": (lambda: (tanh(conv2d(x, w, 2)) ** 2).sum(), [x, w]),
        "conv2d_transpose": (lambda: (tanh(conv2d_transpose(y, w, 2, (1, 7, 6))) ** 2).sum(), [y, w]),
        "identity": (lambda: (identity(a) * r).sum(), [a]),
        "relu": (lambda: (relu(kinked) * r).sum(), [kinked]),
        "sigmoid": (lambda: (sigmoid(a) * r).sum(), [a]),
        "tanh": (lambda: (tanh(a) * r).sum(), [a]),
        "softmax": (lambda: (softmax(a, axis=-1) * r).sum(), [a]),
        "softmax_axis0": (lambda: (softmax(a, axis=0) * r).sum(), [a]),
        "log_softmax": (lambda: (log_softmax(a) * r).sum(), [a]),
        "tree_marginals": (lambda: (marginals_op(scores) * np.arange(32.0).reshape(2, 4, 4)).sum(), [scores]),
        "tree_nll": (lambda: tree_nll(scores, gold), [scores]),
    }


PRIMITIVES = sorted(primitive_cases(np.random.default_rng(0)))
