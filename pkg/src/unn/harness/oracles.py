"""Independent reference computations shared by the test suite and ``selftest``.

Nothing here calls the code it is meant to check: regularizer minimizers come
from grid search, tree quantities from exhaustive enumeration, gradients from
central differences and the single-pass models from plain numpy.
"""

from __future__ import annotations

import functools
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax, xlogy

from ..tensor import Tape, Tensor, backward

# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def central_difference(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (only ``coords`` if given)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(loss_fn, params: list[Tensor], h: float = 1e-5, max_coords: int | None = None, seed: int = 0):
    """Worst relative error between tape gradients and central differences.

    ``loss_fn()`` builds a scalar loss from ``params``; for large tensors a
    random subset of ``max_coords`` coordinates is checked.
    """
    with Tape():
        loss = loss_fn()
        grads = backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        original = p.data.copy()

        def f(x, p=p):
            p.data = x
            with Tape():
                return float(loss_fn().data)

        num = central_difference(f, original, h, coords)
        p.data = original
        ana = grads[p]
        if coords is not None:
            num, ana = num.reshape(-1)[coords], ana.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
    return worst


# ---------------------------------------------------------------------------
# regularizer minimizers
# ---------------------------------------------------------------------------
EDGE = 1e-13


def _psi(kind: str, h: np.ndarray):
    """Psi summed over the last axis (vectorized over leading axes)."""
    if kind in ("identity", "relu"):
        return 0.5 * np.sum(h * h, axis=-1)
    if kind == "sigmoid":
        return np.sum(xlogy(h, h) + xlogy(1 - h, 1 - h), axis=-1)
    if kind == "tanh":
        p, q = (1 + h) / 2, (1 - h) / 2
        return np.sum(xlogy(p, p) + xlogy(q, q), axis=-1)
    if kind == "softmax":
        return np.sum(xlogy(h, h), axis=-1)
    raise ValueError(kind)


def _box(kind: str, z: np.ndarray):
    big = float(np.max(np.abs(z))) + 1.0
    return {
        "identity": (-big, big),
        "relu": (0.0, big),
        "sigmoid": (EDGE, 1 - EDGE),
        "tanh": (-1 + EDGE, 1 - EDGE),
    }[kind]


def conjugate_argmin(kind: str, z, grid: int = 401) -> np.ndarray:
    """argmin_h -<z, h> + Psi(h) for a 2-vector z by dense grid plus refinement."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (2,):
        raise ValueError("the grid oracle works in two dimensions")
    opts = {"xatol": 1e-12, "fatol": 1e-15, "maxiter": 8000}
    if kind == "softmax":
        # the simplex in R^2 is the segment h = (t, 1 - t)
        def obj1(t):
            h = np.stack([t, 1 - t], axis=-1)
            return h @ -z + _psi(kind, h)

        ts = np.linspace(EDGE, 1 - EDGE, grid * grid)
        t0 = ts[np.argmin(obj1(ts))]
        res = minimize(lambda v: float(obj1(v[0])), [t0], method="Nelder-Mead", bounds=[(EDGE, 1 - EDGE)], options=opts)
        return np.array([res.x[0], 1 - res.x[0]])
    lo, hi = _box(kind, z)

    def obj(h):
        return h @ -z + _psi(kind, h)

    axis = np.linspace(lo, hi, grid)
    mesh = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    vals = obj(mesh)
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    # quasi-Newton polish from the best grid point; gradients by finite differences
    res = minimize(
        lambda h: float(obj(h)),
        mesh[i, j],
        method="L-BFGS-B",
        bounds=[(lo, hi), (lo, hi)],
        options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000},
    )
    return res.x


# ---------------------------------------------------------------------------
# dependency trees by enumeration
# ---------------------------------------------------------------------------
@functools.cache
def all_head_vectors(n: int) -> tuple:
    """Every head assignment of n words that forms a tree rooted at 0."""
    out = []
    for heads in itertools.product(range(n + 1), repeat=n):
        if any(h == m + 1 for m, h in enumerate(heads)):
            continue
        ok = True
        for m in range(1, n + 1):
            seen, v = set(), m
            while v != 0:
                if v in seen:
                    ok = False
                    break
                seen.add(v)
                v = heads[v - 1]
            if not ok:
                break
        if ok:
            out.append(heads)
    return tuple(out)


def packed_indicator(heads) -> np.ndarray:
    n = len(heads)
    y = np.zeros((n, n))
    for m, h in enumerate(heads):
        y[m if h == 0 else h - 1, m] = 1.0
    return y


def tree_oracle(scores) -> dict:
    """log Z, marginals, entropy and the best tree of an n x n packed score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    heads = all_head_vectors(n)
    ys = np.array([packed_indicator(h) for h in heads])
    tot = np.einsum("tij,ij->t", ys, s)
    log_z = float(logsumexp(tot))
    p = np.exp(tot - log_z)
    best = int(np.argmax(tot))
    return {
        "n_trees": len(heads),
        "log_partition": log_z,
        "marginals": np.einsum("t,tij->ij", p, ys),
        "entropy": float(-np.sum(xlogy(p, p))),
        "best_score": float(tot[best]),
        "best_heads": list(heads[best]),
        "scores_by_tree": dict(zip(heads, tot)),
    }


# ---------------------------------------------------------------------------
# hand-coded feed-forward references
# ---------------------------------------------------------------------------
def relu(x):
    return np.maximum(x, 0.0)


def mlp_reference(W, V, b_H, b_Y, x):
    return softmax(relu(x @ W.T + b_H) @ V.T + b_Y, axis=-1)


def correlate(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation of (B, C, H, W) images with (O, C, kh, kw) filters."""
    kh, kw = w.shape[-2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchwij,ocij->bohw", win, w)


def conv_reference(W1, W2, V, b1, b2, b, X, stride=2):
    h1 = np.tanh(correlate(X, W1, stride) + b1[:, None, None])
    h2 = np.tanh(correlate(h1, W2, stride) + b2[:, None, None])
    return softmax(np.einsum("bchw,ochw->bo", h2, V) + b, axis=-1)


def sinusoid(n: int, d: int) -> np.ndarray:
    p = np.zeros((n, d))
    for i in range(n):
        for j in range(d):
            angle = i / 10000 ** ((j - j % 2) / d)
            p[i, j] = np.sin(angle) if j % 2 == 0 else np.cos(angle)
    return p


def attention_reference(W_Q, W_K, W_V, X, P):
    """Single-head scaled dot-product attention over rows of X + P."""
    d = W_Q.shape[0]
    xp = X + P
    q, k, v = xp @ W_Q.T, xp @ W_K.T, xp @ W_V.T
    return softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(d), axis=-1) @ v


def biaffine_reference(V, W_H, W_M, b_H, b_M, X):
    """Plain biaffine arc scorer: relu projections and scores H V M^T."""
    h = relu(X @ W_H.T + b_H)
    m = relu(X @ W_M.T + b_M)
    return h @ V @ np.swapaxes(m, -1, -2)
