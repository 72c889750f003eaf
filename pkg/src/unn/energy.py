"""Factor graphs with multilinear energies and block coordinate descent.

Every variable X carries a unary energy ``-<b, x> + Psi(x)`` whose conjugate
gradient is an ordinary activation function, and every factor contributes
an energy that is linear in each linked variable separately.  Minimizing
the total energy over one variable therefore has the closed form
``x <- activation(pre_activation)``, where the pre-activation is the bias
plus one "message" per factor touching x.

The same code path serves plain inference (:func:`run_schedule`, no tape)
and training (:func:`unroll`, inside a :class:`~unn.tensor.Tape`), so the
two are numerically identical by construction.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from . import trees
from .tensor import (
    Tensor,
    _active_tape,
    activation,
    as_tensor,
    conv2d,
    conv2d_transpose,
    no_grad,
    permute,
    roll_axis,
    swap_last,
    tensordot,
    where,
)

DOMAIN_TOL = 1e-9


class DomainError(ValueError):
    """A variable value lies outside its regularizer's domain."""


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------
class RegularizerKind(enum.Enum):
    QUADRATIC = "quadratic"
    QUADRATIC_NONNEG = "quadratic_nonneg"
    BINARY_ENTROPY_01 = "binary_entropy_01"
    BINARY_ENTROPY_PM1 = "binary_entropy_pm1"
    NEG_ENTROPY_SIMPLEX = "neg_entropy_simplex"
    STRUCTURED_TREE = "structured_tree"


_ACTIVATION_OF = {
    RegularizerKind.QUADRATIC: "identity",
    RegularizerKind.QUADRATIC_NONNEG: "relu",
    RegularizerKind.BINARY_ENTROPY_01: "sigmoid",
    RegularizerKind.BINARY_ENTROPY_PM1: "tanh",
    RegularizerKind.NEG_ENTROPY_SIMPLEX: "softmax",
    RegularizerKind.STRUCTURED_TREE: "tree_marginals",
}

_ALIASES = {act: kind for kind, act in _ACTIVATION_OF.items()}
_ALIASES["tree"] = RegularizerKind.STRUCTURED_TREE


@dataclass(frozen=True)
class Regularizer:
    """A strictly convex Psi, optionally scaled: Psi_s(h) = scale * Psi(h).

    The scaled conjugate gradient is ``activation(t / scale)``.  Softmax
    normalizes along the last axis.
    """

    kind: RegularizerKind
    scale: float = 1.0

    @classmethod
    def of(cls, name, scale: float = 1.0) -> Regularizer:
        if isinstance(name, Regularizer):
            return name
        if isinstance(name, RegularizerKind):
            return cls(name, scale)
        if name in _ALIASES:
            return cls(_ALIASES[name], scale)
        return cls(RegularizerKind(name), scale)

    @property
    def activation_name(self) -> str:
        return _ACTIVATION_OF[self.kind]

    def activate(self, z: Tensor) -> Tensor:
        if self.scale != 1.0:
            z = z * (1.0 / self.scale)
        if self.kind is RegularizerKind.STRUCTURED_TREE:
            return trees.marginals_op(z)
        return activation(self.activation_name, z, axis=-1)

    def value(self, h: np.ndarray, generating_scores: np.ndarray | None = None) -> float:
        """Psi(h); raises :class:`DomainError` outside the domain."""
        k = self.kind
        h = np.asarray(h, dtype=np.float64)
        if k is RegularizerKind.QUADRATIC:
            v = 0.5 * np.sum(h * h)
        elif k is RegularizerKind.QUADRATIC_NONNEG:
            if np.any(h < -DOMAIN_TOL):
                raise DomainError("negative entry under the relu regularizer")
            v = 0.5 * np.sum(h * h)
        elif k is RegularizerKind.BINARY_ENTROPY_01:
            if np.any(h < -DOMAIN_TOL) or np.any(h > 1 + DOMAIN_TOL):
                raise DomainError("entry outside [0, 1] under the sigmoid regularizer")
            h = np.clip(h, 0.0, 1.0)
            v = np.sum(xlogy(h, h) + xlogy(1 - h, 1 - h))
        elif k is RegularizerKind.BINARY_ENTROPY_PM1:
            if np.any(np.abs(h) > 1 + DOMAIN_TOL):
                raise DomainError("entry outside [-1, 1] under the tanh regularizer")
            p = np.clip((1 + h) / 2, 0.0, 1.0)
            q = np.clip((1 - h) / 2, 0.0, 1.0)
            v = np.sum(xlogy(p, p) + xlogy(q, q))
        elif k is RegularizerKind.NEG_ENTROPY_SIMPLEX:
            if np.any(h < -DOMAIN_TOL) or np.any(np.abs(h.sum(axis=-1) - 1) > 1e-8):
                raise DomainError("rows are not on the probability simplex")
            h = np.clip(h, 0.0, None)
            v = np.sum(xlogy(h, h))
        else:
            if generating_scores is None:
                raise DomainError("tree variable is not a marginal point with known generating scores")
            tm = trees.TreeMarginals(h, generating_scores, trees.tree_log_partition(generating_scores))
            v = -np.sum(trees.structured_entropy(tm))
        return float(self.scale * v)


# ---------------------------------------------------------------------------
# graph structure
# ---------------------------------------------------------------------------
@dataclass
class VariableNode:
    """A variable block.  ``free_mask`` (broadcastable, True = free) marks a
    partially observed variable whose remaining entries stay fixed."""

    name: str
    shape: tuple
    regularizer: Regularizer
    bias: Tensor | None = None
    observed: bool = False
    value: Tensor | None = None
    free_mask: np.ndarray | None = None
    dropout_mask: np.ndarray | None = None
    generating_scores: np.ndarray | None = None


class Factor:
    """Base class: an energy linear in each linked variable separately.

    Subclasses implement :meth:`message`, the coefficient of the target in
    the energy, so that ``E_f = -<x_target, message(target)> + const``.
    """

    kind = "multilinear"
    variables: tuple = ()

    def params(self) -> list[Tensor]:
        return []

    def message(self, target: str, vals: dict) -> Tensor:
        raise NotImplementedError

    def energy(self, vals: dict) -> Tensor:
        first = self.variables[0]
        return -(as_tensor(vals[first]) * self.message(first, vals)).sum()


class Bilinear(Factor):
    """``E = -<x_a, W . (x_b + offset)>`` contracting the trailing feature axes.

    ``W`` has shape ``a_event + b_event``; any leading axes of the variables
    (batch, sequence position) are carried along.  With vector blocks this is
    ``-x_a^T W x_b``.
    """

    kind = "bilinear"

    def __init__(self, a: str, b: str, weight: Tensor, a_ndim: int = 1, b_ndim: int = 1, offset=None):
        self.variables = (a, b)
        self.weight = weight
        self.a_ndim = a_ndim
        self.b_ndim = b_ndim
        self.offset = None if offset is None else as_tensor(offset)
        if weight.ndim != a_ndim + b_ndim:
            raise ValueError(f"weight rank {weight.ndim} != {a_ndim} + {b_ndim}")

    def params(self):
        return [self.weight]

    def message(self, target, vals):
        a, b = self.variables
        w = self.weight
        if target == a:
            xb = as_tensor(vals[b])
            if self.offset is not None:
                xb = xb + self.offset
            nb = self.b_ndim
            wt = permute(w, list(range(self.a_ndim, w.ndim)) + list(range(self.a_ndim)))
            return tensordot(xb, wt, nb)
        if target == b:
            return tensordot(as_tensor(vals[a]), w, self.a_ndim)
        raise KeyError(target)

    def energy(self, vals):
        a = self.variables[0]
        return -(as_tensor(vals[a]) * self.message(a, vals)).sum()


class Multilinear(Factor):
    """General ``E = -<W, x_1 (x) ... (x) x_k>`` over unbatched blocks.

    The message to ``x_i`` rolls the axes of ``W`` belonging to ``x_i`` to the
    front and contracts the rest against the other variables.
    """

    kind = "trilinear"

    def __init__(self, variables: Sequence[str], weight: Tensor, ranks: Sequence[int] | None = None):
        self.variables = tuple(variables)
        self.weight = weight
        self.ranks = tuple(ranks) if ranks is not None else (1,) * len(self.variables)
        if sum(self.ranks) != weight.ndim:
            raise ValueError("weight rank does not match the linked variable ranks")

    def params(self):
        return [self.weight]

    def message(self, target, vals):
        i = self.variables.index(target)
        starts = np.cumsum((0,) + self.ranks)
        w = self.weight
        own = list(range(starts[i], starts[i + 1]))
        if len(own) == 1:
            w = roll_axis(w, own[0])
        else:
            rest = [ax for ax in range(w.ndim) if ax not in own]
            w = permute(w, own + rest)
        others = [j for j in range(len(self.variables)) if j != i]
        for j in reversed(others):
            w = tensordot(w, as_tensor(vals[self.variables[j]]), self.ranks[j])
        return w


class Convolution(Factor):
    """``E = -<H, conv2d(X; W)>`` with valid padding and a fixed stride."""

    kind = "convolutional"

    def __init__(self, x: str, h: str, weight: Tensor, stride: int):
        self.variables = (x, h)
        self.weight = weight
        self.stride = stride

    def params(self):
        return [self.weight]

    def message(self, target, vals):
        x, h = self.variables
        if target == h:
            return conv2d(vals[x], self.weight, self.stride)
        if target == x:
            xv = as_tensor(vals[x])
            return conv2d_transpose(vals[h], self.weight, self.stride, xv.shape[-3:])
        raise KeyError(target)

    def energy(self, vals):
        h = self.variables[1]
        return -(as_tensor(vals[h]) * self.message(h, vals)).sum()


class AttentionScores(Factor):
    """``E = -<S, Q K^T>`` (no parameters)."""

    kind = "trilinear"

    def __init__(self, q: str, k: str, s: str):
        self.variables = (s, q, k)

    def message(self, target, vals):
        s, q, k = self.variables
        if target == s:
            return as_tensor(vals[q]) @ swap_last(vals[k])
        if target == q:
            return as_tensor(vals[s]) @ as_tensor(vals[k])
        if target == k:
            return swap_last(vals[s]) @ as_tensor(vals[q])
        raise KeyError(target)


class AttentionMix(Factor):
    """``E = -<H, S V>`` (no parameters)."""

    kind = "trilinear"

    def __init__(self, v: str, s: str, h: str):
        self.variables = (h, s, v)

    def message(self, target, vals):
        h, s, v = self.variables
        if target == h:
            return as_tensor(vals[s]) @ as_tensor(vals[v])
        if target == s:
            return as_tensor(vals[h]) @ swap_last(vals[v])
        if target == v:
            return swap_last(vals[s]) @ as_tensor(vals[h])
        raise KeyError(target)


class Biaffine(Factor):
    """Tree link ``E = -<Y, H V M^T>`` with H, M stored one row per word."""

    kind = "structured_tree_link"

    def __init__(self, h: str, m: str, y: str, weight: Tensor):
        self.variables = (y, h, m)
        self.weight = weight

    def params(self):
        return [self.weight]

    def message(self, target, vals):
        y, h, m = self.variables
        w = self.weight
        if target == y:
            return (as_tensor(vals[h]) @ w) @ swap_last(vals[m])
        if target == h:
            return (as_tensor(vals[y]) @ as_tensor(vals[m])) @ swap_last(w)
        if target == m:
            return (swap_last(vals[y]) @ as_tensor(vals[h])) @ w
        raise KeyError(target)


class FactorGraph:
    """Bipartite graph of :class:`VariableNode` and :class:`Factor` objects."""

    def __init__(self):
        self.variables: dict[str, VariableNode] = {}
        self.factors: list[Factor] = []

    def add_variable(
        self,
        name: str,
        shape,
        regularizer="identity",
        bias=None,
        observed: bool = False,
        value=None,
        free_mask=None,
        scale: float = 1.0,
    ) -> VariableNode:
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        var = VariableNode(
            name=name,
            shape=tuple(shape),
            regularizer=Regularizer.of(regularizer, scale),
            bias=None if bias is None else as_tensor(bias),
            observed=observed,
            value=None if value is None else as_tensor(value),
            free_mask=None if free_mask is None else np.asarray(free_mask, dtype=bool),
        )
        if var.value is not None and var.value.shape != var.shape:
            raise ValueError(f"value shape {var.value.shape} != declared {var.shape} for {name!r}")
        self.variables[name] = var
        return var

    def add_factor(self, factor: Factor) -> Factor:
        for v in factor.variables:
            if v not in self.variables:
                raise KeyError(f"factor links unknown variable {v!r}")
        self.factors.append(factor)
        return factor

    def factors_of(self, name: str) -> list[Factor]:
        return [f for f in self.factors if name in f.variables]

    def params(self) -> list[Tensor]:
        seen, out = set(), []
        for f in self.factors:
            for p in f.params():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        for v in self.variables.values():
            if v.bias is not None and id(v.bias) not in seen:
                seen.add(id(v.bias))
                out.append(v.bias)
        return out

    def values(self) -> dict:
        return {n: v.value for n, v in self.variables.items()}

    def set_value(self, name: str, value) -> None:
        var = self.variables[name]
        value = as_tensor(value)
        if value.shape != var.shape:
            raise ValueError(f"value shape {value.shape} != declared {var.shape} for {name!r}")
        var.value = value
        var.generating_scores = None


# ---------------------------------------------------------------------------
# energy and updates
# ---------------------------------------------------------------------------
def _unary_energy(var: VariableNode) -> float:
    h = var.value.data
    e = var.regularizer.value(h, var.generating_scores)
    if var.bias is not None:
        e -= float(np.sum(np.broadcast_to(var.bias.data, h.shape) * h))
    return e


def total_energy(g: FactorGraph, strict: bool = True) -> float:
    """Sum of unary and factor energies at the current assignment.

    Unary terms of fully observed variables are constant and skipped.  An
    out-of-domain value raises :class:`DomainError`, or gives ``inf`` when
    ``strict`` is false (e.g. a zero-initialized simplex variable).
    """
    with no_grad():
        total = 0.0
        for var in g.variables.values():
            if var.value is None:
                raise ValueError(f"variable {var.name!r} has no value")
            if var.observed:
                continue
            try:
                total += _unary_energy(var)
            except DomainError:
                if strict:
                    raise
                return math.inf
        vals = g.values()
        for f in g.factors:
            total += float(f.energy(vals).data)
    return total


def pre_activation(g: FactorGraph, name: str) -> Tensor:
    """Bias plus the messages of every factor linked to ``name``."""
    var = g.variables[name]
    vals = g.values()
    z = None
    for f in g.factors_of(name):
        m = f.message(name, vals)
        z = m if z is None else z + m
    if var.bias is not None:
        z = var.bias if z is None else z + var.bias
    if z is None:
        z = Tensor(np.zeros(var.shape))
    elif z.shape != var.shape:
        z = z + Tensor(np.zeros(var.shape))
    return z


def update_variable(g: FactorGraph, name: str) -> Tensor:
    """Exact block minimization over one variable; returns the new value."""
    var = g.variables[name]
    if var.observed:
        raise ValueError(f"variable {name!r} is observed")
    z = pre_activation(g, name)
    new = var.regularizer.activate(z)
    if var.dropout_mask is not None:
        new = new * var.dropout_mask
    if var.free_mask is not None:
        new = where(var.free_mask, new, var.value)
    var.value = new
    var.generating_scores = (
        z.data * (1.0 / var.regularizer.scale)
        if var.regularizer.kind is RegularizerKind.STRUCTURED_TREE
        else None
    )
    if var.regularizer.kind is RegularizerKind.STRUCTURED_TREE:
        new.meta = dict(new.meta or {}, preactivation=z)
    return new


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------
INIT_KINDS = ("zero", "random", "uniform")


@dataclass
class Schedule:
    """``order`` is one round; it is repeated ``iterations`` times."""

    order: list
    iterations: int = 1
    init: str = "zero"
    rounds: list | None = None

    def round(self, i: int) -> list:
        return self.rounds[i] if self.rounds is not None else self.order

    def validate(self, g: FactorGraph) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.init not in INIT_KINDS:
            raise ValueError(f"unknown init {self.init!r}; expected one of {INIT_KINDS}")
        orders = self.rounds if self.rounds is not None else [self.order]
        for order in orders:
            for name in order:
                if name not in g.variables:
                    raise ValueError(f"schedule names unknown variable {name!r}")
                if g.variables[name].observed:
                    raise ValueError(f"schedule updates observed variable {name!r}")


def randomized_schedule(variables: Sequence[str], rng: np.random.Generator, last=None) -> list:
    """A uniformly random permutation of ``variables``, with ``last`` appended."""
    if len(variables) == 0:
        raise ValueError("need at least one variable")
    order = [variables[i] for i in rng.permutation(len(variables))]
    if last is not None:
        order.append(last)
    return order


def initialize(g: FactorGraph, init: str = "zero", rng: np.random.Generator | None = None) -> None:
    """Set every free variable (not partially observed) to its starting value."""
    if init != "zero" and rng is None:
        rng = np.random.default_rng(0)
    for var in g.variables.values():
        if var.observed or var.free_mask is not None:
            continue
        kind = var.regularizer.kind
        if init == "zero":
            var.value = Tensor(np.zeros(var.shape))
            var.generating_scores = None
            continue
        if init == "random":
            u = rng.uniform(0.0, 1.0, size=var.shape)
        elif kind in (RegularizerKind.NEG_ENTROPY_SIMPLEX, RegularizerKind.STRUCTURED_TREE):
            u = np.zeros(var.shape)
        else:
            var.value = Tensor(np.zeros(var.shape))
            var.generating_scores = None
            continue
        with no_grad():
            var.value = var.regularizer.activate(Tensor(u * var.regularizer.scale))
        var.generating_scores = u if kind is RegularizerKind.STRUCTURED_TREE else None


@dataclass
class ScheduleResult:
    values: dict
    energy_trace: list = field(default_factory=list)
    updates: list = field(default_factory=list)


def _execute(g, s, rng, trace):
    s.validate(g)
    initialize(g, s.init, rng)
    result = ScheduleResult(values={})
    if trace:
        result.energy_trace.append(total_energy(g, strict=False))
    for it in range(s.iterations):
        for name in s.round(it):
            update_variable(g, name)
            result.updates.append(name)
            if trace:
                result.energy_trace.append(total_energy(g, strict=False))
    return result


def run_schedule(
    g: FactorGraph, s: Schedule, rng: np.random.Generator | None = None, trace: bool = True
) -> ScheduleResult:
    """Initialize and run ``s.iterations`` rounds of in-order block updates.

    Returns the final values as numpy arrays together with the total energy
    recorded after initialization and after every single update.
    """
    with no_grad():
        result = _execute(g, s, rng, trace)
    result.values = {n: v.value.data for n, v in g.variables.items()}
    return result


def unroll(g: FactorGraph, s: Schedule, rng: np.random.Generator | None = None, trace: bool = False) -> ScheduleResult:
    """Like :func:`run_schedule` but recorded on the active tape.

    Values are returned as tensors so a loss built from them can be
    differentiated with respect to the graph's parameters.
    """
    if _active_tape() is None:
        raise RuntimeError("unroll needs an active Tape")
    result = _execute(g, s, rng, trace)
    result.values = {n: v.value for n, v in g.variables.items()}
    return result


def energy_nonincreasing(trace: Sequence[float], tol: float = 1e-9) -> bool:
    return all(b <= a + tol for a, b in zip(trace, trace[1:]))
