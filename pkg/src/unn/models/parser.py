"""Biaffine dependency-parsing UNN with a structured tree output.

Variables (one row per word): embeddings X (observed), head features H and
modifier features M (relu), and arc marginals Y.  The tree factor is
``-<Y, H V M^T>`` and Y carries the structured entropy regularizer, so its
block update is matrix-tree marginal inference on the score matrix
``H V M^T``.  Rounds update H, M, Y in that order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import trees
from ..energy import Biaffine, Bilinear, FactorGraph, Schedule, run_schedule, unroll
from ..tensor import Tensor, take

ORDER = ["H", "M", "Y"]


@dataclass
class ParserUnnParams:
    V: Tensor  # d x d
    W_H: Tensor  # d x r
    W_M: Tensor  # d x r
    b_H: Tensor
    b_M: Tensor
    embedding: Tensor  # vocab x r

    @classmethod
    def init(cls, vocab: int, rng: np.random.Generator, d: int = 128, r: int = 128):
        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

        return cls(
            V=normal((d, d), 1.0 / np.sqrt(d)),
            W_H=normal((d, r), 1.0 / np.sqrt(r)),
            W_M=normal((d, r), 1.0 / np.sqrt(r)),
            b_H=Tensor(np.zeros(d), requires_grad=True),
            b_M=Tensor(np.zeros(d), requires_grad=True),
            embedding=normal((vocab, r), 1.0),
        )

    def tensors(self) -> list[Tensor]:
        return [self.V, self.W_H, self.W_M, self.b_H, self.b_M, self.embedding]


def parser_graph(p: ParserUnnParams, tokens) -> FactorGraph:
    """Graph for a batch of equal-length sentences ``tokens`` (B, n)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, n = tokens.shape
    if n < 1:
        raise ValueError("empty sentence")
    d = p.V.shape[0]
    x = take(p.embedding, tokens)
    g = FactorGraph()
    g.add_variable("X", x.shape, "identity", observed=True, value=x)
    g.add_variable("H", (b, n, d), "relu", bias=p.b_H)
    g.add_variable("M", (b, n, d), "relu", bias=p.b_M)
    g.add_variable("Y", (b, n, n), "structured_tree")
    g.add_factor(Bilinear("H", "X", p.W_H))
    g.add_factor(Bilinear("M", "X", p.W_M))
    g.add_factor(Biaffine("H", "M", "Y", p.V))
    return g


def _apply_dropout(g: FactorGraph, rate: float, rng: np.random.Generator) -> None:
    # one mask per variable per sentence, reused by every inner iteration
    for name in ("H", "M"):
        var = g.variables[name]
        keep = rng.random(var.shape) >= rate
        var.dropout_mask = keep / (1.0 - rate)


@dataclass
class ParseOutput:
    marginals: np.ndarray  # (B, n, n)
    scores: np.ndarray  # (B, n, n)
    trees: list
    energy_trace: list


def parser_forward(p: ParserUnnParams, tokens, k: int = 1, trace: bool = False, single_root: bool = False):
    """Marginals after k rounds of (H, M, Y) and the CLE-decoded trees."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = parser_graph(p, tokens)
    res = run_schedule(g, Schedule(ORDER, k), trace=trace)
    scores = g.variables["Y"].generating_scores
    decoded = [trees.cle_decode(s, single_root=single_root) for s in scores]
    return ParseOutput(res.values["Y"], scores, decoded, res.energy_trace)


def parser_loss(
    p: ParserUnnParams,
    tokens,
    gold_packed,
    k: int = 1,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Summed tree NLL of the gold trees under the final score matrices.

    Must run inside a Tape.  The last Y update already solved the
    matrix-tree system for these scores, so the loss reuses it.
    """
    g = parser_graph(p, tokens)
    if dropout > 0:
        _apply_dropout(g, dropout, rng if rng is not None else np.random.default_rng(0))
    unroll(g, Schedule(ORDER, k))
    y = g.variables["Y"].value
    z = y.meta["preactivation"]
    return trees.tree_nll(z, gold_packed, log_partition=y.meta["log_partition"], marginals=y.data)
