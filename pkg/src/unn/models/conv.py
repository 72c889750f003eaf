"""Convolutional UNN: image X, two tanh feature maps H1, H2 and a softmax class y.

Classification runs the rounds (H1, H2, Y, H2) with X observed; prototype
generation fixes y to a one-hot class and runs (H2, H1, X, H1) with X free
under a tanh regularizer.  Both directions share every parameter.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from ..energy import (
    Bilinear,
    Convolution,
    FactorGraph,
    Schedule,
    initialize,
    run_schedule,
    unroll,
    update_variable,
)
from ..tensor import Tensor, clip, log, no_grad, reshape, take

FORWARD_ORDER = ["H1", "H2", "Y", "H2"]
GENERATE_ORDER = ["H2", "H1", "X", "H1"]
LOG_EPS = 1e-12


def _conv_out(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


@dataclass
class ConvUnnParams:
    W1: Tensor  # c1 x 1 x k1 x k1
    W2: Tensor  # c2 x c1 x k2 x k2
    V: Tensor  # classes x c2 x h2 x w2
    b1: Tensor
    b2: Tensor
    b: Tensor
    stride: int = 2
    gamma: float = 0.1

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        image_size: int = 28,
        channels=(32, 64),
        kernels=(6, 4),
        stride: int = 2,
        n_classes: int = 10,
        gamma: float = 0.1,
    ) -> ConvUnnParams:
        c1, c2 = channels
        k1, k2 = kernels
        s1 = _conv_out(image_size, k1, stride)
        s2 = _conv_out(s1, k2, stride)
        if s1 < 1 or s2 < 1:
            raise ValueError(f"image size {image_size} too small for kernels {kernels}")

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

        return cls(
            W1=uniform((c1, 1, k1, k1), k1 * k1),
            W2=uniform((c2, c1, k2, k2), c1 * k2 * k2),
            V=uniform((n_classes, c2, s2, s2), c2 * s2 * s2),
            b1=uniform((c1,), k1 * k1),
            b2=uniform((c2,), c1 * k2 * k2),
            b=uniform((n_classes,), c2 * s2 * s2),
            stride=stride,
            gamma=gamma,
        )

    def tensors(self) -> list[Tensor]:
        return [self.W1, self.W2, self.V, self.b1, self.b2, self.b]

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    @property
    def n_classes(self) -> int:
        return self.V.shape[0]

    def shapes(self, image_hw) -> tuple:
        h, w = image_hw
        k1, k2 = self.W1.shape[-1], self.W2.shape[-1]
        s = self.stride
        h1, w1 = _conv_out(h, k1, s), _conv_out(w, k1, s)
        h2, w2 = _conv_out(h1, k2, s), _conv_out(w1, k2, s)
        return (self.W1.shape[0], h1, w1), (self.W2.shape[0], h2, w2)


def conv_graph(p: ConvUnnParams, batch: int, image_hw, x=None, y=None) -> FactorGraph:
    """Build the four-variable graph; pass ``x`` or ``y`` to observe it."""
    (c1, h1, w1), (c2, h2, w2) = p.shapes(image_hw)
    if p.V.shape[1:] != (c2, h2, w2):
        raise ValueError(f"image size {tuple(image_hw)} does not fit output tensor {p.V.shape}")
    g = FactorGraph()
    g.add_variable("X", (batch, 1) + tuple(image_hw), "tanh", observed=x is not None, value=x)
    g.add_variable("H1", (batch, c1, h1, w1), "tanh", bias=reshape(p.b1, (c1, 1, 1)))
    g.add_variable("H2", (batch, c2, h2, w2), "tanh", bias=reshape(p.b2, (c2, 1, 1)))
    g.add_variable("Y", (batch, p.n_classes), "softmax", bias=p.b, observed=y is not None, value=y)
    g.add_factor(Convolution("X", "H1", p.W1, p.stride))
    g.add_factor(Convolution("H1", "H2", p.W2, p.stride))
    g.add_factor(Bilinear("Y", "H2", p.V, a_ndim=1, b_ndim=3))
    return g


def _as_batch(X) -> Tensor:
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim == 2:
        X = reshape(X, (1, 1) + X.shape)
    elif X.ndim == 3:
        X = reshape(X, (1,) + X.shape)
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected images shaped (B, 1, H, W), got {X.shape}")
    return X


def conv_forward(p: ConvUnnParams, X, k: int = 1, init: str = "zero", rng=None, track=False, trace=False):
    """Class probabilities after k rounds of (H1, H2, Y, H2).

    With ``trace`` the :class:`ScheduleResult` is returned instead.
    """
    X = _as_batch(X)
    g = conv_graph(p, X.shape[0], X.shape[2:], x=X)
    s = Schedule(FORWARD_ORDER, k, init)
    res = unroll(g, s, rng, trace) if track else run_schedule(g, s, rng, trace)
    return res if trace else res.values["Y"]


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def conv_generate(p: ConvUnnParams, classes, k: int = 1, image_hw=(28, 28), track=False, trace=False):
    """Prototype images for the given class indices, values in (-1, 1)."""
    y = Tensor(one_hot(classes, p.n_classes))
    g = conv_graph(p, y.shape[0], image_hw, y=y)
    s = Schedule(GENERATE_ORDER, k, "zero")
    res = unroll(g, s, None, trace) if track else run_schedule(g, s, None, trace)
    return res if trace else res.values["X"]


def cross_entropy_probs(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true classes (clamped log)."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = take(probs, (np.arange(len(labels)), labels))
    return -log(clip(picked, LOG_EPS, 1.0)).mean()


def binary_cross_entropy_pixels(x_hat: Tensor, x: Tensor) -> Tensor:
    """Mean per-pixel BCE after mapping both images from [-1, 1] to [0, 1]."""
    target = (x.data + 1.0) / 2.0
    pred = clip((x_hat + 1.0) * 0.5, LOG_EPS, 1.0 - LOG_EPS)
    bce = -(log(pred) * target + log(1.0 - pred) * (1.0 - target))
    return bce.mean()


def conv_joint_loss(p: ConvUnnParams, X, labels, k: int = 1, gamma: float | None = None) -> Tensor:
    """Classification cross-entropy plus gamma times reconstruction BCE.

    Must run inside a Tape.  With gamma == 0 the generation pass is skipped.
    """
    gamma = p.gamma if gamma is None else gamma
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    X = _as_batch(X)
    probs = conv_forward(p, X, k, track=True)
    loss = cross_entropy_probs(probs, labels)
    if gamma > 0:
        x_hat = conv_generate(p, labels, k, X.shape[2:], track=True)
        loss = loss + gamma * binary_cross_entropy_pixels(x_hat, X)
    return loss


# ---------------------------------------------------------------------------
# untied baseline
# ---------------------------------------------------------------------------
def count_params(channels, kernels, image_size=28, stride=2, n_classes=10) -> int:
    c1, c2 = channels
    k1, k2 = kernels
    s2 = _conv_out(_conv_out(image_size, k1, stride), k2, stride)
    return c1 * k1 * k1 + c1 + c2 * c1 * k2 * k2 + c2 + n_classes * c2 * s2 * s2 + n_classes


def untied_widths(k: int, channels=(32, 64), kernels=(6, 4), image_size=28, stride=2, n_classes=10):
    """Channel widths whose k-fold parameter count best matches the tied model."""
    target = count_params(channels, kernels, image_size, stride, n_classes)
    if k == 1:
        return tuple(channels)
    ratio = channels[0] / channels[1]
    best, best_gap = None, None
    for c2 in range(1, channels[1] + 1):
        for c1 in sorted({max(1, int(np.floor(c2 * ratio))), max(1, int(np.ceil(c2 * ratio)))}):
            gap = abs(k * count_params((c1, c2), kernels, image_size, stride, n_classes) - target)
            if best_gap is None or gap < best_gap:
                best, best_gap = (c1, c2), gap
    return best


class UntiedConvModel:
    """The unrolled conv UNN with fresh parameters for every round."""

    def __init__(self, layers: list[ConvUnnParams], image_size: int = 28):
        self.layers = layers
        self.image_size = image_size

    @property
    def k(self) -> int:
        return len(self.layers)

    def tensors(self) -> list[Tensor]:
        return [t for p in self.layers for t in p.tensors()]

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def forward(self, X, track: bool = False):
        """Class probabilities; round i uses only the parameters of layer i."""
        X = _as_batch(X)
        g = conv_graph(self.layers[0], X.shape[0], X.shape[2:], x=X)
        initialize(g, "zero")
        conv1, conv2, dense = g.factors
        with contextlib.nullcontext() if track else no_grad():
            for p in self.layers:
                conv1.weight, conv2.weight, dense.weight = p.W1, p.W2, p.V
                g.variables["H1"].bias = reshape(p.b1, (p.b1.shape[0], 1, 1))
                g.variables["H2"].bias = reshape(p.b2, (p.b2.shape[0], 1, 1))
                g.variables["Y"].bias = p.b
                for name in FORWARD_ORDER:
                    update_variable(g, name)
        y = g.variables["Y"].value
        return y if track else y.data


def untied_unrolled_baseline(
    k: int, rng: np.random.Generator, image_size=28, channels=(32, 64), kernels=(6, 4), stride=2, n_classes=10
):
    if k < 1:
        raise ValueError("k must be >= 1")
    widths = untied_widths(k, channels, kernels, image_size, stride, n_classes)
    layers = [
        ConvUnnParams.init(rng, image_size, widths, kernels, stride, n_classes, gamma=0.0) for _ in range(k)
    ]
    return UntiedConvModel(layers, image_size)
