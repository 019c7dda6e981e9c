import numpy as np
import pytest

from gpmcl.layers import Conv2d, Flatten, Linear, MaxPool2d, ReLU
from gpmcl.network import (
    Gradients,
    Network,
    accuracy,
    make_network,
    mse_loss,
    softmax_cross_entropy,
)
from gpmcl.seeding import generator

from oracles import finite_difference_grads, span_residual


def small_mixed_net(seed=0):
    # conv -> relu -> pool -> flatten -> fc -> relu -> head, ~1.6k params
    rng = lambda tag: generator(seed, tag)
    layers = [
        Conv2d(2, 3, 3, rng("c1"), stride=1, padding=1),
        ReLU(),
        MaxPool2d(2),
        Flatten(),
        Linear(3 * 3 * 3, 8, rng("f1")),
        ReLU(),
    ]
    return Network(layers, [Linear(8, 4, rng("h"))], "single")


class TestForward:
    def test_zero_weights_zero_logits(self):
        net = make_network("mlp-100-100", (4,), 3, 1, "single", seed=0)
        for w in net.all_weights():
            w[:] = 0.0
        logits = net.forward(np.ones((2, 4)))
        assert np.all(logits == 0.0)

    def test_identity_single_layer(self):
        net = Network([Flatten()], [Linear(3, 3, generator(0, "h"))], "single")
        net.heads[0].weight = np.eye(3)
        x = np.array([[1.0, -2.0, 3.0]])
        assert np.array_equal(net.forward(x), x)

    def test_matches_straight_line_evaluation(self):
        # Independent re-evaluation of a 2-layer net with explicit numpy.
        net = make_network("mlp-100-100", (6,), 3, 1, "single", seed=3)
        x = np.random.default_rng(1).standard_normal((5, 6))
        w1 = net.layers[1].weight
        w2 = net.layers[3].weight
        wh = net.heads[0].weight
        ref = np.maximum(np.maximum(x @ w1.T, 0.0) @ w2.T, 0.0) @ wh.T
        assert np.abs(net.forward(x) - ref).max() <= 1e-12

    def test_deterministic(self):
        a = make_network("small-conv", (1, 16, 16), 4, 1, "single", seed=9)
        b = make_network("small-conv", (1, 16, 16), 4, 1, "single", seed=9)
        x = np.random.default_rng(0).standard_normal((3, 1, 16, 16))
        assert np.array_equal(a.forward(x), b.forward(x))

    def test_unknown_head(self):
        net = make_network("mlp-100-100", (4,), 2, 3, "multi", seed=0)
        with pytest.raises(LookupError):
            net.forward(np.zeros((1, 4)), task=7)


class TestBackward:
    def test_saturated_correct_prediction_has_tiny_gradient(self):
        net = Network([Flatten()], [Linear(2, 2, generator(0, "h"))], "single")
        net.heads[0].weight = np.array([[50.0, 0.0], [-50.0, 0.0]])
        x = np.array([[1.0, 0.0]])
        logits = net.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, np.array([0]))
        grads = net.backward(dlogits)
        assert loss <= 1e-6
        assert np.linalg.norm(grads.head) <= 1e-6

    def test_single_layer_mse_hand_case(self):
        # W = 0, x = [1, 0], y = [1]: gradient of 0.5|Wx - y|^2 is [[-1, 0]].
        net = Network([Flatten()], [Linear(2, 1, generator(0, "h"))], "single")
        net.heads[0].weight = np.zeros((1, 2))
        x = np.array([[1.0, 0.0]])
        out = net.forward(x)
        loss, dout = mse_loss(out, np.array([[1.0]]))
        grads = net.backward(dout)
        assert loss == 0.5
        assert grads.head.tolist() == [[-1.0, 0.0]]

    def test_finite_differences_mixed_net(self):
        net = small_mixed_net(seed=4)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((5, 2, 6, 6))
        y = rng.integers(0, 4, size=5)

        logits = net.forward(x)
        _, dlogits = softmax_cross_entropy(logits, y)
        grads = net.backward(dlogits)
        analytic = [g for g in grads.trunk if g is not None] + [grads.head]

        def loss_fn():
            l, _ = softmax_cross_entropy(net.forward(x), y)
            return l

        numeric = finite_difference_grads(loss_fn, net.all_weights(), h=1e-5)
        for a, n in zip(analytic, numeric):
            denom = max(np.abs(n).max(), 1e-8)
            assert np.abs(a - n).max() / denom <= 1e-4

    def test_finite_differences_mse(self):
        net = make_network("mlp-linear", (3,), 2, 1, "single", seed=2)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3))
        t = rng.standard_normal((4, 2))

        out = net.forward(x)
        _, dout = mse_loss(out, t)
        grads = net.backward(dout)
        analytic = [g for g in grads.trunk if g is not None] + [grads.head]

        def loss_fn():
            l, _ = mse_loss(net.forward(x), t)
            return l

        numeric = finite_difference_grads(loss_fn, net.all_weights(), h=1e-5)
        for a, n in zip(analytic, numeric):
            assert np.abs(a - n).max() / max(np.abs(n).max(), 1e-8) <= 1e-4


class TestSpanProperties:
    def test_fc_gradient_rows_lie_in_batch_input_span(self):
        net = make_network("mlp-100-100", (12,), 5, 1, "single", seed=5)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((7, 12))
        y = rng.integers(0, 5, size=7)
        logits = net.forward(x)
        _, dlogits = softmax_cross_entropy(logits, y)
        grads = net.backward(dlogits)
        # First linear layer: every gradient row is a combination of inputs.
        assert span_residual(grads.trunk[1], x) <= 1e-8

    def test_conv_gradient_columns_lie_in_patch_span(self):
        net = small_mixed_net(seed=7)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 2, 6, 6))
        y = rng.integers(0, 4, size=4)
        logits = net.forward(x)
        _, dlogits = softmax_cross_entropy(logits, y)
        grads = net.backward(dlogits)
        conv = net.layers[0]
        patches = conv.representation().T  # rows are patch vectors
        assert span_residual(grads.trunk[0].T, patches) <= 1e-8


class TestSgd:
    def test_zero_lr_rejected(self):
        net = make_network("mlp-100-100", (4,), 2, 1, "single", seed=0)
        g = Gradients(trunk=[None] * len(net.layers), head=np.zeros((2, 100)), task=0)
        with pytest.raises(ValueError):
            net.sgd_step(g, 0.0)

    def test_hand_step(self):
        net = Network([Flatten()], [Linear(1, 1, generator(0, "h"))], "single")
        net.heads[0].weight = np.array([[1.0]])
        g = Gradients(trunk=[None], head=np.array([[0.5]]), task=0)
        net.sgd_step(g, 0.1)
        assert net.heads[0].weight.tolist() == [[0.95]]

    def test_loss_decreases_on_convex_problem(self):
        net = Network([Flatten()], [Linear(3, 2, generator(1, "h"))], "single")
        rng = np.random.default_rng(2)
        x = rng.standard_normal((20, 3))
        w_true = rng.standard_normal((2, 3))
        t = x @ w_true.T
        losses = []
        for _ in range(50):
            out = net.forward(x)
            loss, dout = mse_loss(out, t)
            losses.append(loss)
            net.sgd_step(net.backward(dout), lr=0.05)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_multi_head_updates_only_active_head(self):
        net = make_network("mlp-100-100", (4,), 2, 2, "multi", seed=0)
        before = net.heads[1].weight.copy()
        x = np.random.default_rng(0).standard_normal((3, 4))
        logits = net.forward(x, task=0)
        _, dlogits = softmax_cross_entropy(logits, np.array([0, 1, 0]))
        net.sgd_step(net.backward(dlogits, task=0), lr=0.1)
        assert np.array_equal(net.heads[1].weight, before)


def test_accuracy():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0]])
    assert accuracy(logits, np.array([0, 1, 1])) == pytest.approx(2.0 / 3.0)
