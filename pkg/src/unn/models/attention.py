"""Undirected self-attention for masked sequence completion.

Sequence values are stored one row per position (n x d).  The energies are

    E_XQ = -<Q, (X + P) W_Q^T>   (likewise K, V)
    E_QKS = -<S, Q K^T>
    E_VSH = -<H, S V>

with quadratic unaries everywhere except S, whose rows carry a scaled
negative entropy so that its update is a row softmax at temperature sqrt(d).
X is partially observed: only the masked rows are free, and they start at
the mask-token embedding.  Predictions are read from the updated rows with
the embedding table as a tied output projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..energy import (
    AttentionMix,
    AttentionScores,
    Bilinear,
    FactorGraph,
    Schedule,
    randomized_schedule,
    run_schedule,
    unroll,
    update_variable,
)
from ..tensor import Tensor, log_softmax, take

MASK_TOKEN = 0
BLOCKS = ["Q", "K", "V", "S", "H"]
FORWARD_BACKWARD = ["Q", "K", "V", "S", "H", "S", "V", "K", "Q", "X"]


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal positions: P[i, 2j] = sin(i / 10000^(2j/d)), P[i, 2j+1] = cos(...)."""
    pos = np.arange(n)[:, None]
    j = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, j / d)
    p = np.zeros((n, d))
    p[:, 0::2] = np.sin(angle)
    p[:, 1::2] = np.cos(angle[:, : d // 2])
    return p


@dataclass
class AttentionUnnParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    embedding: Tensor  # vocab x d; row 0 is the mask token

    @classmethod
    def init(cls, vocab: int, d: int, rng: np.random.Generator, weight_scale: float = 1.0, embed_scale: float = 1.0):
        def w():
            return Tensor(rng.normal(0.0, weight_scale / np.sqrt(d), (d, d)), requires_grad=True)

        return cls(
            W_Q=w(), W_K=w(), W_V=w(), embedding=Tensor(rng.normal(0.0, embed_scale, (vocab, d)), requires_grad=True)
        )

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.W_Q, self.W_K, self.W_V, self.embedding]


def attention_graph(p: AttentionUnnParams, tokens: np.ndarray, mask: np.ndarray) -> FactorGraph:
    """Graph for a batch of equal-length sequences ``tokens`` (B, n)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    b, n = tokens.shape
    if n == 0:
        raise ValueError("empty sequence")
    d = p.d
    ids = np.where(mask, MASK_TOKEN, tokens)
    x0 = take(p.embedding, ids)
    pos = Tensor(positional_encoding(n, d))
    g = FactorGraph()
    g.add_variable("X", (b, n, d), "identity", value=x0, free_mask=mask[..., None])
    for name in ("Q", "K", "V", "H"):
        g.add_variable(name, (b, n, d), "identity")
    g.add_variable("S", (b, n, n), "softmax", scale=float(np.sqrt(d)))
    g.add_factor(Bilinear("Q", "X", p.W_Q, offset=pos))
    g.add_factor(Bilinear("K", "X", p.W_K, offset=pos))
    g.add_factor(Bilinear("V", "X", p.W_V, offset=pos))
    g.add_factor(AttentionScores("Q", "K", "S"))
    g.add_factor(AttentionMix("V", "S", "H"))
    return g


def make_schedule(kind: str, k: int, rng: np.random.Generator | None = None) -> Schedule:
    if kind in ("forward_backward", "fb"):
        return Schedule(FORWARD_BACKWARD, k)
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        rounds = [randomized_schedule(BLOCKS, rng, last="X") for _ in range(k)]
        return Schedule(rounds[0], k, rounds=rounds)
    raise ValueError(f"unknown schedule kind {kind!r}")


def attention_step(p: AttentionUnnParams, state: dict, which: str, tokens, mask) -> np.ndarray:
    """Apply one block update to an explicit state {X, Q, K, V, S, H}."""
    if which not in BLOCKS + ["X"]:
        raise ValueError(f"unknown block {which!r}")
    g = attention_graph(p, tokens, mask)
    for name, value in state.items():
        g.set_value(name, value)
    return update_variable(g, which).data


def masked_logits(p: AttentionUnnParams, x: Tensor, mask: np.ndarray) -> Tensor:
    """Logits over value tokens (mask token excluded) at the masked rows."""
    rows = take(x, np.nonzero(mask))
    return rows @ take(p.embedding, slice(1, None)).T


def attention_complete(
    p: AttentionUnnParams,
    tokens,
    mask,
    k: int = 1,
    schedule: str = "forward_backward",
    rng=None,
    track: bool = False,
):
    """Run the schedule and return logits (M, vocab - 1) for the M masked rows."""
    tokens = np.atleast_2d(np.asarray(tokens))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    g = attention_graph(p, tokens, mask)
    s = make_schedule(schedule, k, rng)
    if track:
        unroll(g, s)
    else:
        run_schedule(g, s, trace=False)
    x = g.variables["X"].value
    logits = masked_logits(p, x, mask)
    return logits if track else logits.data


def masked_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy; ``targets`` are token ids (1-based values)."""
    targets = np.asarray(targets, dtype=np.int64) - 1
    lp = log_softmax(logits, axis=-1)
    return -take(lp, (np.arange(len(targets)), targets)).mean()


def attention_loss(p, tokens, mask, k=1, schedule="forward_backward", rng=None) -> Tensor | None:
    """Training loss over the masked positions, or None when nothing is masked."""
    tokens = np.atleast_2d(np.asarray(tokens))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if not mask.any():
        return None
    logits = attention_complete(p, tokens, mask, k, schedule, rng, track=True)
    return masked_cross_entropy(logits, tokens[mask])
