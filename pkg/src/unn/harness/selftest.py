"""Fast oracle checks behind ``unn selftest``; the full suite lives in tests/."""

from __future__ import annotations

import numpy as np

from .. import trees
from ..energy import Schedule, energy_nonincreasing, run_schedule
from ..models import attention as A
from ..models import conv as C
from ..models import mlp as M
from ..models import parser as P
from ..tensor import Tensor, activation, conv2d, conv2d_transpose, tanh
from . import oracles
from .tracegraphs import FAMILIES, random_traced_run


def _conjugates(rng) -> bool:
    worst = 0.0
    for kind in ["identity", "relu", "sigmoid", "tanh", "softmax"]:
        for _ in range(5):
            z = rng.uniform(-4, 4, 2)
            worst = max(worst, np.abs(activation(kind, Tensor(z)).data - oracles.conjugate_argmin(kind, z)).max())
    return worst <= 1e-4


def _trees(rng) -> bool:
    ok = True
    for n in range(1, 5):
        for _ in range(10):
            s = rng.normal(0, 2, (n, n))
            ref = oracles.tree_oracle(s)
            tm = trees.tree_marginals(s)
            ok &= abs(tm.log_partition - ref["log_partition"]) <= 1e-10 * max(1, abs(ref["log_partition"]))
            ok &= np.abs(tm.marginals - ref["marginals"]).max() <= 1e-10
            ok &= abs(trees.structured_entropy(tm) - ref["entropy"]) <= 1e-10
            si = np.round(s * 3)
            ok &= trees.cle_decode(si).score(si) == oracles.tree_oracle(si)["best_score"]
    return bool(ok)


def _gradients(rng) -> bool:
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 2)))
    k = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
    img = Tensor(rng.normal(size=(1, 1, 7, 7)))
    s = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    errs = [
        oracles.gradient_check(lambda: tanh(w @ x).sum(), [w]),
        oracles.gradient_check(lambda: (tanh(conv2d(img, k, 2)) ** 2).sum(), [k]),
        oracles.gradient_check(lambda: (trees.marginals_op(s) * Tensor(np.arange(9.0).reshape(3, 3))).sum(), [s]),
    ]
    return max(errs) <= 1e-6


def _adjoint(rng) -> bool:
    w = rng.normal(size=(2, 1, 3, 3))
    q = rng.normal(size=(1, 8, 8))
    lhs_map = conv2d(Tensor(q), Tensor(w), 2).data
    p = rng.normal(size=lhs_map.shape)
    lhs = float(np.sum(p * lhs_map))
    rhs = float(np.sum(q * conv2d_transpose(Tensor(p), Tensor(w), 2, q.shape).data))
    return abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))


def _equivalences(rng) -> bool:
    p = M.MlpUnnParams.init(5, 7, 3, rng)
    x = rng.normal(size=(4, 5))
    e1 = np.abs(M.mlp_forward(p, x) - oracles.mlp_reference(p.W.data, p.V.data, p.b_H.data, p.b_Y.data, x)).max()

    cp = C.ConvUnnParams.init(rng)
    X = rng.uniform(-1, 1, (2, 1, 28, 28))
    ref = oracles.conv_reference(*(t.data for t in cp.tensors()), X)
    e2 = np.abs(C.conv_forward(cp, X) - ref).max()

    ap = A.AttentionUnnParams.init(9, 8, rng)
    tokens = rng.integers(1, 9, size=(2, 6))
    g = A.attention_graph(ap, tokens, np.zeros((2, 6), dtype=bool))
    h = run_schedule(g, Schedule(A.BLOCKS, 1), trace=False).values["H"]
    xe = ap.embedding.data[tokens]
    ref = oracles.attention_reference(ap.W_Q.data, ap.W_K.data, ap.W_V.data, xe, oracles.sinusoid(6, 8))
    e3 = np.abs(h - ref).max()

    pp = P.ParserUnnParams.init(11, rng, d=6, r=5)
    tok = rng.integers(0, 11, size=(2, 5))
    out = P.parser_forward(pp, tok)
    scores = oracles.biaffine_reference(
        pp.V.data, pp.W_H.data, pp.W_M.data, pp.b_H.data, pp.b_M.data, pp.embedding.data[tok]
    )
    e4 = max(np.abs(out.scores - scores).max(), np.abs(out.marginals - trees.tree_marginals(scores).marginals).max())
    return max(e1, e2, e3, e4) <= 1e-12


def _monotone(rng) -> bool:
    return all(
        energy_nonincreasing(random_traced_run(fam, np.random.default_rng(seed), 3)[0])
        for fam in FAMILIES
        for seed in range(10)
    )


CHECKS = [
    ("conjugate activations vs grid search", _conjugates),
    ("matrix-tree and decoding vs enumeration", _trees),
    ("gradients vs central differences", _gradients),
    ("convolution adjoint identity", _adjoint),
    ("single-pass equivalence with feed-forward references", _equivalences),
    ("energy monotonicity on random graphs", _monotone),
]


def run_selftest(report=print, seed: int = 0) -> bool:
    ok_all = True
    for name, check in CHECKS:
        try:
            ok = bool(check(np.random.default_rng(seed)))
        except Exception as err:  # noqa: BLE001 - reported as a failing check
            ok = False
            name = f"{name} ({type(err).__name__}: {err})"
        report(f"{'PASS' if ok else 'FAIL'}  {name}")
        ok_all &= ok
    return ok_all
