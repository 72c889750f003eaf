import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unn.energy import (
    Bilinear,
    DomainError,
    FactorGraph,
    Regularizer,
    RegularizerKind,
    Schedule,
    energy_nonincreasing,
    initialize,
    pre_activation,
    randomized_schedule,
    run_schedule,
    total_energy,
    unroll,
    update_variable,
)
from unn.harness.oracles import conjugate_argmin, gradient_check, mlp_reference
from unn.harness.tracegraphs import pairwise_graph
from unn.models import conv as C
from unn.models.mlp import MlpUnnParams, mlp_graph
from unn.tensor import Tape, Tensor, backward, log, relu, softmax, take


def pair(w, kind_x="identity", kind_h="identity"):
    g = FactorGraph()
    g.add_variable("X", (2,), kind_x)
    g.add_variable("H", (2,), kind_h)
    g.add_factor(Bilinear("H", "X", Tensor(w)))
    return g


class TestTotalEnergy:
    def test_all_zero(self, rng):
        g = pair(rng.normal(size=(2, 2)))
        initialize(g, "zero")
        assert total_energy(g) == 0.0

    def test_pairwise_hand_value(self):
        g = pair(np.eye(2))
        g.set_value("X", [1.0, 0.0])
        g.set_value("H", [1.0, 0.0])
        assert total_energy(g) == 0.0

    def test_lone_softmax_entropy(self):
        g = FactorGraph()
        g.add_variable("Y", (2,), "softmax", value=Tensor([0.5, 0.5]))
        assert total_energy(g) == pytest.approx(-0.6931471805599453, abs=1e-15)

    def test_bias_term(self):
        g = FactorGraph()
        g.add_variable("Y", (2,), "identity", bias=Tensor([1.0, 2.0]), value=Tensor([3.0, -1.0]))
        # -<b, y> + |y|^2 / 2 = -(3 - 2) + 5
        assert total_energy(g) == pytest.approx(4.0, abs=1e-15)

    def test_domain_error(self):
        g = pair(np.eye(2), kind_h="relu")
        g.set_value("X", [1.0, 0.0])
        g.set_value("H", [-1.0, 0.0])
        with pytest.raises(DomainError):
            total_energy(g)
        assert total_energy(g, strict=False) == np.inf

    def test_observed_unary_skipped(self):
        g = FactorGraph()
        g.add_variable("X", (2,), "identity", observed=True, value=Tensor([3.0, 4.0]))
        assert total_energy(g) == 0.0

    def test_tree_variable_needs_scores(self):
        g = FactorGraph()
        g.add_variable("Y", (2, 2), "structured_tree", value=Tensor(np.full((2, 2), 0.5)))
        with pytest.raises(DomainError):
            total_energy(g)


class TestPreActivation:
    def test_identity_neighbor(self, rng):
        g = pair(np.eye(2))
        x = rng.normal(size=2)
        g.set_value("X", x)
        g.set_value("H", np.zeros(2))
        np.testing.assert_array_equal(pre_activation(g, "H").data, x)

    def test_no_factors_gives_bias(self):
        g = FactorGraph()
        g.add_variable("Y", (3,), "identity", bias=Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(pre_activation(g, "Y").data, [1.0, 2.0, 3.0])

    def test_mlp_hidden_formula(self, rng):
        p = MlpUnnParams.init(2, 2, 2, rng)
        x, y = rng.normal(size=2), rng.dirichlet([1.0, 1.0])
        g = mlp_graph(p, x)
        g.set_value("H", np.zeros(2))
        g.set_value("Y", y)
        ref = p.W.data @ x + p.V.data.T @ y + p.b_H.data
        np.testing.assert_allclose(pre_activation(g, "H").data, ref, atol=1e-15)


class TestUpdate:
    def one(self, kind, z):
        g = FactorGraph()
        g.add_variable("A", (len(z),), kind, bias=Tensor(z))
        initialize(g, "zero")
        return update_variable(g, "A").data

    def test_relu(self):
        np.testing.assert_array_equal(self.one("relu", [1.0, -2.0]), [1.0, 0.0])

    def test_softmax(self):
        np.testing.assert_array_equal(self.one("softmax", [0.0, 0.0]), [0.5, 0.5])

    def test_quadratic_is_identity(self, rng):
        z = rng.normal(size=4)
        np.testing.assert_array_equal(self.one("identity", z), z)

    def test_observed_rejected(self):
        g = FactorGraph()
        g.add_variable("X", (1,), observed=True, value=Tensor([1.0]))
        with pytest.raises(ValueError):
            update_variable(g, "X")

    def test_scaled_regularizer(self, rng):
        z = rng.normal(size=3)
        np.testing.assert_allclose(
            Regularizer.of("softmax", 4.0).activate(Tensor(z)).data, softmax(Tensor(z / 4.0)).data, atol=1e-15
        )

    @pytest.mark.parametrize("kind", ["identity", "relu", "sigmoid", "tanh", "softmax"])
    def test_idempotent(self, kind, rng):
        g, s = pairwise_graph(rng, 1)
        for name, var in g.variables.items():
            if not var.observed:
                var.regularizer = Regularizer.of(kind)
        initialize(g, "zero")
        name = s.order[0]
        first = update_variable(g, name).data.copy()
        np.testing.assert_allclose(update_variable(g, name).data, first, atol=1e-12)


@pytest.mark.parametrize("kind", ["identity", "relu", "sigmoid", "tanh", "softmax"])
def test_conjugate_matches_grid_search(kind):
    rng = np.random.default_rng(11)
    for _ in range(10):
        z = rng.uniform(-4, 4, 2)
        g = FactorGraph()
        g.add_variable("A", (2,), kind, bias=Tensor(z))
        initialize(g, "zero")
        np.testing.assert_allclose(update_variable(g, "A").data, conjugate_argmin(kind, z), atol=1e-4)


def test_regularizer_kinds_map_to_activations():
    expected = {
        "quadratic": "identity",
        "quadratic_nonneg": "relu",
        "binary_entropy_01": "sigmoid",
        "binary_entropy_pm1": "tanh",
        "neg_entropy_simplex": "softmax",
        "structured_tree": "tree_marginals",
    }
    for kind in RegularizerKind:
        assert Regularizer.of(kind.value).activation_name == expected[kind.value]


class TestSchedule:
    def test_k_zero_returns_init(self, rng):
        g = pair(rng.normal(size=(2, 2)))
        res = run_schedule(g, Schedule(["H", "X"], 0))
        np.testing.assert_array_equal(res.values["H"], np.zeros(2))
        assert res.updates == []

    def test_unknown_variable(self, rng):
        g = pair(rng.normal(size=(2, 2)))
        with pytest.raises(ValueError):
            run_schedule(g, Schedule(["Z"], 1))

    def test_observed_in_schedule(self, rng):
        g = FactorGraph()
        g.add_variable("X", (2,), observed=True, value=Tensor([1.0, 2.0]))
        g.add_variable("H", (2,), "relu")
        g.add_factor(Bilinear("H", "X", Tensor(rng.normal(size=(2, 2)))))
        with pytest.raises(ValueError):
            run_schedule(g, Schedule(["H", "X"], 1))
        run_schedule(g, Schedule(["H"], 3))
        np.testing.assert_array_equal(g.variables["X"].value.data, [1.0, 2.0])

    def test_init_kinds(self, rng):
        g = FactorGraph()
        g.add_variable("Y", (3, 4), "softmax")
        g.add_variable("H", (5,), "tanh")
        initialize(g, "uniform")
        np.testing.assert_allclose(g.variables["Y"].value.data, 0.25)
        initialize(g, "random", rng)
        np.testing.assert_allclose(g.variables["Y"].value.data.sum(-1), 1.0)
        assert np.all(np.abs(g.variables["H"].value.data) < 1)
        with pytest.raises(ValueError):
            run_schedule(g, Schedule(["Y"], 1, init="gaussian"))

    def test_energy_trace_per_update(self, rng):
        g, s = pairwise_graph(rng, 2)
        res = run_schedule(g, s)
        assert len(res.energy_trace) == len(res.updates) + 1

    def test_monotone_on_100_random_graphs(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            g, s = pairwise_graph(rng, 3)
            s.init = ["zero", "random", "uniform"][seed % 3]
            assert energy_nonincreasing(run_schedule(g, s, rng).energy_trace)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4))
    def test_monotone_property(self, seed, k):
        rng = np.random.default_rng(seed)
        g, s = pairwise_graph(rng, k)
        assert energy_nonincreasing(run_schedule(g, s, rng).energy_trace)


class TestRandomizedSchedule:
    def test_single(self, rng):
        assert randomized_schedule(["A"], rng) == ["A"]

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            randomized_schedule([], rng)

    def test_uniform_permutations(self):
        rng = np.random.default_rng(5)
        counts = dict.fromkeys(itertools.permutations("ABC"), 0)
        for _ in range(10_000):
            counts[tuple(randomized_schedule(list("ABC"), rng))] += 1
        for c in counts.values():
            assert abs(c / 10_000 - 1 / 6) <= 0.02

    def test_output_last(self, rng):
        for _ in range(1000):
            order = randomized_schedule(list("QKVSH"), rng, last="X")
            assert order[-1] == "X" and sorted(order[:-1]) == sorted("QKVSH")


class TestUnroll:
    def test_needs_tape(self, rng):
        with pytest.raises(RuntimeError):
            unroll(pair(rng.normal(size=(2, 2))), Schedule(["H"], 1))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_same_values_as_run_schedule(self, seed, k):
        g, s = pairwise_graph(np.random.default_rng(seed), k)
        ref = run_schedule(g, s, np.random.default_rng(1), trace=False).values
        g2, s2 = pairwise_graph(np.random.default_rng(seed), k)
        with Tape():
            got = unroll(g2, s2, np.random.default_rng(1)).values
        for name in ref:
            np.testing.assert_allclose(got[name].data, ref[name], atol=1e-12, rtol=0)

    def test_mlp_gradient_matches_hand_network(self, rng):
        p = MlpUnnParams.init(4, 5, 3, rng)
        x = rng.normal(size=(6, 4))
        labels = rng.integers(0, 3, size=6)
        params = p.tensors()
        with Tape():
            y = unroll(mlp_graph(p, x), Schedule(["H", "Y"], 1)).values["Y"]
            loss = -log(take(y, (np.arange(6), labels))).mean()
            g_unn = backward(loss, params)
        with Tape():
            h = relu(Tensor(x) @ p.W.T + p.b_H)
            y2 = softmax(h @ p.V.T + p.b_Y)
            g_ref = backward(-log(take(y2, (np.arange(6), labels))).mean(), params)
        np.testing.assert_allclose(y.data, mlp_reference(*(t.data for t in params), x), atol=1e-12)
        for t in params:
            np.testing.assert_allclose(g_unn[t], g_ref[t], rtol=1e-10, atol=1e-14)

    def test_conv_k3_finite_differences(self, rng):
        p = C.ConvUnnParams.init(rng, image_size=6, channels=(2, 3), kernels=(2, 2), n_classes=3)
        X = rng.uniform(-1, 1, (2, 1, 6, 6))
        labels = np.array([0, 2])
        assert gradient_check(lambda: C.cross_entropy_probs(C.conv_forward(p, X, 3, track=True), labels),
                              p.tensors()) <= 1e-6

    def test_unreachable_params_zero(self, rng):
        g = pair(rng.normal(size=(2, 2)))
        stray = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        g.add_variable("Z", (2,), "identity")
        g.add_variable("U", (2,), "identity")
        g.add_factor(Bilinear("Z", "U", stray))
        w = g.factors[0].weight
        w.requires_grad = True
        with Tape():
            h = unroll(g, Schedule(["X", "H"], 1, init="random"), rng).values["H"]
            grads = backward((h * h).sum(), [w, stray])
        np.testing.assert_array_equal(grads[stray], np.zeros((2, 2)))


def test_dropout_mask_reused_across_rounds(rng):
    g = pair(rng.normal(size=(2, 2)), kind_h="relu")
    g.variables["X"].bias = Tensor([1.0, 1.0])
    mask = np.array([0.0, 2.0])
    g.variables["H"].dropout_mask = mask
    initialize(g, "zero")
    for _ in range(3):
        update_variable(g, "X")
        h = update_variable(g, "H").data
        assert h[0] == 0.0
