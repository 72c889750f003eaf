"""Non-projective dependency trees: matrix-tree inference and CLE decoding.

Arc scores use the packed n x n layout: entry ``(h, m)`` with ``h != m``
scores the arc from word h to word m (0-based), and the diagonal entry
``(m, m)`` scores the arc from the root to word m.  Trees may attach several
words to the root unless ``single_root`` decoding is requested.

All inference functions accept a stack of score matrices ``(..., n, n)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, apply_op, as_tensor

MAX_ENUMERATION = 6


class TreeConditioningError(ArithmeticError):
    """The root-augmented Laplacian is numerically singular."""


class UnsupportedPointError(ValueError):
    """Structured entropy requested at a point with no known generating scores."""


class InvalidTreeError(ValueError):
    """A head sequence does not form an arborescence rooted at the root."""


@dataclass(frozen=True)
class DependencyTree:
    """``heads[i]`` is the head of word ``i + 1``; 0 denotes the root."""

    heads: tuple

    def __init__(self, heads):
        object.__setattr__(self, "heads", tuple(int(h) for h in heads))

    @property
    def n(self) -> int:
        return len(self.heads)

    def validate(self) -> DependencyTree:
        validate_heads(self.heads)
        return self

    def packed(self) -> np.ndarray:
        return heads_to_packed(self.heads)

    def score(self, scores: np.ndarray) -> float:
        return float(np.sum(self.packed() * scores))


@dataclass
class TreeMarginals:
    marginals: np.ndarray
    generating_scores: np.ndarray | None
    log_partition: np.ndarray | float | None = None
    n: int = field(init=False)

    def __post_init__(self):
        self.n = self.marginals.shape[-1]


def validate_heads(heads) -> None:
    n = len(heads)
    if n == 0:
        raise InvalidTreeError("empty tree")
    for m, h in enumerate(heads, start=1):
        if not 0 <= h <= n:
            raise InvalidTreeError(f"head {h} of word {m} out of range 0..{n}")
        if h == m:
            raise InvalidTreeError(f"word {m} is its own head")
    for start in range(1, n + 1):
        seen = set()
        node = start
        while node != 0:
            if node in seen:
                raise InvalidTreeError(f"cycle through word {node}")
            seen.add(node)
            node = heads[node - 1]


def is_valid_tree(heads) -> bool:
    try:
        validate_heads(heads)
    except InvalidTreeError:
        return False
    return True


def heads_to_packed(heads) -> np.ndarray:
    n = len(heads)
    y = np.zeros((n, n))
    for m, h in enumerate(heads):
        if h == 0:
            y[m, m] = 1.0
        else:
            y[h - 1, m] = 1.0
    return y


# ---------------------------------------------------------------------------
# matrix-tree theorem
# ---------------------------------------------------------------------------
RCOND_FAST = 1e-3


def _gth_factor(a: np.ndarray, r: np.ndarray):
    """Subtraction-free LU of the Laplacian of one sentence.

    ``a`` holds the off-diagonal arc weights and ``r`` the root weights (the
    column excess of the Laplacian).  Each elimination step only adds and
    multiplies nonnegative numbers, so pivots and factors keep full relative
    accuracy however badly the Laplacian is conditioned.  Returns the pivots
    and the reduced arc weights; row k above the diagonal and column k below
    it are the factors of step k.
    """
    a, r = a.copy(), r.copy()
    n = len(r)
    piv = np.empty(n)
    for k in range(n):
        col, row = a[k + 1 :, k], a[k, k + 1 :]
        piv[k] = r[k] + col.sum()
        if piv[k] == 0.0:
            break
        r[k + 1 :] += row * (r[k] / piv[k])
        a[k + 1 :, k + 1 :] += np.outer(col, row / piv[k])
    return piv, a


def _gth_inverse(piv, a):
    n = len(piv)
    lower = np.eye(n)  # inverse of the unit lower factor
    for i in range(1, n):
        lower[i] += (a[i, :i] / piv[:i]) @ lower[:i]
    upper = np.zeros((n, n))  # inverse of the upper factor
    for k in range(n - 1, -1, -1):
        upper[k] = a[k, k + 1 :] @ upper[k + 1 :]
        upper[k, k] += 1.0
        upper[k] /= piv[k]
    return upper @ lower


def _gth_left_solve(piv, a, r):
    """x with x^T L = r^T, for nonnegative r."""
    n = len(piv)
    z = np.empty(n)
    for j in range(n):
        z[j] = (r[j] + z[:j] @ a[:j, j]) / piv[j]
    x = np.empty(n)
    for k in range(n - 1, -1, -1):
        x[k] = z[k] + x[k + 1 :] @ a[k + 1 :, k] / piv[k]
    return x


def _accurate_solve(w: np.ndarray):
    """Log-determinant, marginals and inverse of one Laplacian given exp-scores ``w``.

    The marginal of arc h -> m is w[h, m] Linv[m, m] q[h, m], where q[h, m]
    is the chance that a walk from h along normalized incoming arcs reaches
    the root before it visits m.  Every factor is a sum of nonnegative terms.
    """
    n = len(w)
    eye = np.eye(n, dtype=bool)
    r = np.diag(w).copy()
    off = np.where(eye, 0.0, w)
    piv, red = _gth_factor(off, r)
    if np.any(piv <= 0.0) or not np.all(np.isfinite(piv)):
        raise TreeConditioningError(
            "Laplacian is numerically singular: some words have no usable path to the root; rescale the arc scores"
        )
    linv = _gth_inverse(piv, red)
    q = np.zeros((n, n))
    for m in range(n):
        keep = np.arange(n) != m
        # deleting m turns arcs m -> j into extra excess of column j
        sub_piv, sub_red = _gth_factor(off[np.ix_(keep, keep)], r[keep] + off[m, keep])
        q[keep, m] = _gth_left_solve(sub_piv, sub_red, r[keep])
    marg = np.where(eye, w * np.diag(linv), w * np.diag(linv)[None, :] * q)
    return float(np.sum(np.log(piv))), marg, linv


def _laplacian_solve(scores: np.ndarray):
    """Return (log_partition, marginals, A, Linv) for stacked score matrices.

    A batched LU solve handles well-conditioned Laplacians; the few whose
    reciprocal condition number falls below ``RCOND_FAST`` are redone one by
    one with subtraction-free elimination.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise ValueError(f"scores must be (..., n, n), got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("arc scores must be finite")
    n = s.shape[-1]
    if n == 1:
        log_z = s[..., 0, 0].copy()
        ones = np.ones_like(s)
        return log_z, ones, ones, ones
    # per-modifier (column) stabilization; marginals are invariant to it
    shift = s.max(axis=-2, keepdims=True)
    a = np.exp(s - shift)
    eye = np.eye(n, dtype=bool)
    lap = -np.where(eye, 0.0, a)
    lap[..., eye] = a.sum(axis=-2)
    batch = lap.shape[:-2]
    with np.errstate(all="ignore"):
        sign, logdet = np.linalg.slogdet(lap)
        logdet = np.array(logdet)
        try:
            linv = np.linalg.inv(lap)
        except np.linalg.LinAlgError:
            linv = np.full_like(lap, np.nan)
        rcond = 1.0 / (np.abs(lap).sum(axis=-2).max(axis=-1) * np.abs(linv).sum(axis=-2).max(axis=-1))
    diag = np.diagonal(linv, axis1=-2, axis2=-1)
    # B[h, m] = Linv[m, m] - Linv[m, h] off the diagonal, Linv[m, m] on it
    b = diag[..., None, :] - np.swapaxes(linv, -1, -2) * ~eye
    marg = a * b
    poor = ~((sign > 0) & np.isfinite(logdet) & (rcond >= RCOND_FAST))
    for idx in zip(*np.nonzero(poor)) if batch else ([()] if poor else []):
        logdet[idx], marg[idx], linv[idx] = _accurate_solve(a[idx])
    log_z = logdet + shift[..., 0, :].sum(axis=-1)
    return log_z, marg, a, linv


def tree_log_partition(scores) -> float | np.ndarray:
    """log of the sum over arborescences of exp(total arc score)."""
    log_z = _laplacian_solve(scores)[0]
    return float(log_z) if np.ndim(log_z) == 0 else log_z


def tree_marginals(scores) -> TreeMarginals:
    """Exact arc marginals of the Gibbs distribution over arborescences."""
    s = np.asarray(scores, dtype=np.float64)
    log_z, marg, _, _ = _laplacian_solve(s)
    log_z = float(log_z) if np.ndim(log_z) == 0 else log_z
    return TreeMarginals(marginals=marg, generating_scores=s.copy(), log_partition=log_z)


def structured_entropy(tm: TreeMarginals) -> float | np.ndarray:
    """Maximum entropy over tree distributions with the given marginals.

    Only defined at marginal points whose generating scores are known, where
    it equals log Z(s) - <s, Y>.
    """
    if tm.generating_scores is None:
        raise UnsupportedPointError("structured entropy needs the generating scores of the marginals")
    log_z = tm.log_partition
    if log_z is None:
        log_z = tree_log_partition(tm.generating_scores)
    ent = np.asarray(log_z) - np.sum(tm.generating_scores * tm.marginals, axis=(-2, -1))
    return float(ent) if np.ndim(ent) == 0 else ent


def tree_nll_loss(gold: DependencyTree, scores) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``gold`` and its gradient in the scores.

    One matrix-tree solve yields both: the gradient is marginals minus the
    gold indicator matrix.
    """
    s = np.asarray(scores, dtype=np.float64)
    if gold.n != s.shape[-1]:
        raise InvalidTreeError(f"gold tree has {gold.n} words, scores have {s.shape[-1]}")
    gold.validate()
    log_z, marg, _, _ = _laplacian_solve(s)
    y = gold.packed()
    return float(log_z - np.sum(y * s)), marg - y


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------
def _marginals_vjp(g, a, marg, linv):
    n = a.shape[-1]
    if n == 1:
        return np.zeros_like(g)
    eye = np.eye(n, dtype=bool)
    gb = g * a
    g_linv = -np.swapaxes(np.where(eye, 0.0, gb), -1, -2)
    g_linv[..., eye] += gb.sum(axis=-2)
    linv_t = np.swapaxes(linv, -1, -2)
    g_lap = -(linv_t @ g_linv @ linv_t)
    g_diag = np.diagonal(g_lap, axis1=-2, axis2=-1)
    g_a = g_diag[..., None, :] - np.where(eye, 0.0, g_lap)
    return g * marg + g_a * a


def marginals_op(z) -> Tensor:
    """Differentiable arc marginals; ``out.meta`` holds the log-partition."""
    z = as_tensor(z)
    log_z, marg, a, linv = _laplacian_solve(z.data)
    out = apply_op(marg, (z,), lambda g: (_marginals_vjp(g, a, marg, linv),))
    out.meta = {"log_partition": log_z, "scores": z.data}
    return out


def tree_nll(z, gold_packed, log_partition=None, marginals=None) -> Tensor:
    """Summed tree NLL over a stack of sentences.

    When the caller already holds the marginals and log-partition of ``z``
    (from the last Y update) they are reused instead of solving again.
    """
    z = as_tensor(z)
    gold = np.asarray(gold_packed, dtype=np.float64)
    if log_partition is None or marginals is None:
        log_partition, marginals, _, _ = _laplacian_solve(z.data)
    loss = np.sum(log_partition) - np.sum(gold * z.data)
    grad = marginals - gold
    return apply_op(np.asarray(loss), (z,), lambda g: (g * grad,))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------
def _find_cycle(heads: np.ndarray):
    n = len(heads)
    color = np.zeros(n, dtype=np.int8)
    for start in range(1, n):
        path = []
        node = start
        while node != 0 and color[node] == 0:
            color[node] = 1
            path.append(node)
            node = heads[node]
        if node != 0 and color[node] == 1:
            return path[path.index(node):]
        for p in path:
            color[p] = 2
    return None


def _cle(scores: np.ndarray) -> np.ndarray:
    """Chu-Liu-Edmonds on a full (N, N) matrix with node 0 as the root."""
    n = scores.shape[0]
    heads = np.full(n, -1)
    # argmax returns the first maximum, i.e. the smallest head index on ties
    heads[1:] = np.argmax(scores[:, 1:], axis=0)
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads
    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cycle] = True
    outside = np.flatnonzero(~in_cycle)  # includes root 0, in increasing order
    cyc = np.array(cycle)
    m = len(outside) + 1
    c = m - 1
    sub = np.full((m, m), -np.inf)
    sub[: m - 1, : m - 1] = scores[np.ix_(outside, outside)]
    cycle_in = scores[heads[cyc], cyc]
    # arcs entering the cycle: best entry point for each outside head
    enter_gain = scores[np.ix_(outside, cyc)] - cycle_in[None, :]
    enter_idx = np.argmax(enter_gain, axis=1)
    sub[: m - 1, c] = enter_gain[np.arange(len(outside)), enter_idx]
    # arcs leaving the cycle: best source inside the cycle for each outside word
    leave = scores[np.ix_(cyc, outside)]
    leave_idx = np.argmax(leave, axis=0)
    sub[c, : m - 1] = leave[leave_idx, np.arange(len(outside))]
    sub[:, 0] = -np.inf
    np.fill_diagonal(sub, -np.inf)
    sub_heads = _cle(sub)
    result = heads.copy()
    for i, node in enumerate(outside):
        if node == 0:
            continue
        h = sub_heads[i]
        result[node] = cyc[leave_idx[i]] if h == c else outside[h]
    h_c = sub_heads[c]
    entry = cyc[enter_idx[h_c]]
    result[entry] = outside[h_c]
    return result


def _full_matrix(packed: np.ndarray) -> np.ndarray:
    n = packed.shape[0]
    full = np.full((n + 1, n + 1), -np.inf)
    full[1:, 1:] = packed
    full[0, 1:] = np.diagonal(packed)
    np.fill_diagonal(full, -np.inf)
    full[:, 0] = -np.inf
    return full


def cle_decode(scores, single_root: bool = False) -> DependencyTree:
    """Maximum-score arborescence of one packed score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"cle_decode takes one (n, n) score matrix, got {s.shape}")
    n = s.shape[0]
    if n == 1:
        return DependencyTree([0])
    full = _full_matrix(s)
    if not single_root:
        return DependencyTree(_cle(full)[1:])
    best, best_score = None, -np.inf
    for r in range(1, n + 1):
        forced = full.copy()
        forced[0, :] = -np.inf
        forced[0, r] = full[0, r]
        heads = _cle(forced)[1:]
        tree = DependencyTree(heads)
        sc = tree.score(s)
        if sc > best_score:
            best, best_score = tree, sc
    return best


def enumerate_arborescences(n: int) -> list[DependencyTree]:
    """Every arborescence over n words rooted at the root (n <= 6)."""
    if not 1 <= n <= MAX_ENUMERATION:
        raise ValueError(f"enumeration supports 1 <= n <= {MAX_ENUMERATION}, got {n}")
    choices = [[h for h in range(n + 1) if h != m] for m in range(1, n + 1)]
    return [DependencyTree(hs) for hs in itertools.product(*choices) if is_valid_tree(hs)]
