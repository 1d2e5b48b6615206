"""Dense engine: forward traces, backward error vectors, SGD, checkpoints."""

import numpy as np
import pytest

from innet import nncore
from innet.nncore import (
    Activation,
    DenseLayer,
    Network,
    backward,
    clone_network,
    forward,
    load_network,
    network,
    save_network,
    sgd_step,
)

from helpers import central_diff, net_flat_params, net_set_flat_params


def identity_layer(w, b):
    return DenseLayer(np.asarray(w, float), np.asarray(b, float), Activation.IDENTITY)


class TestForward:
    def test_identity_passthrough(self):
        net = Network([identity_layer([[1, 0], [0, 1]], [0, 0])])
        out = forward(net, np.array([[3.0, 4.0]])).output
        np.testing.assert_array_equal(out, [[3.0, 4.0]])

    def test_scalar_affine(self):
        net = Network([identity_layer([[2.0]], [1.0])])
        out = forward(net, np.array([[3.0]])).output
        np.testing.assert_array_equal(out, [[7.0]])

    def test_two_layer_hand_chain(self):
        w1 = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 0.0]])
        b1 = np.array([1.0, 0.0, -1.0])
        w2 = np.array([[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]])
        b2 = np.array([0.0, 1.0])
        net = Network([identity_layer(w1, b1), identity_layer(w2, b2)])
        x = np.array([[1.0, -1.0]])
        out = forward(net, x).output
        # independent matrix-chain evaluation
        expected = (w2 @ (w1 @ x[0] + b1) + b2)[None, :]
        np.testing.assert_array_equal(out, expected)
        np.testing.assert_array_equal(out, [[-1.0, 1.0]])

    def test_trace_records_every_layer(self):
        rng = np.random.default_rng(0)
        net = network([3, 5, 2], [Activation.TANH, Activation.IDENTITY], rng)
        trace = forward(net, rng.standard_normal((4, 3)))
        assert len(trace.activations) == len(trace.pre_activations) == 2
        assert trace.batch_size == 4
        assert all(np.isfinite(a).all() for a in trace.activations)

    def test_shape_mismatch_names_layer(self):
        net = Network([identity_layer([[1.0, 0.0]], [0.0])])
        with pytest.raises(ValueError, match="layer 0"):
            forward(net, np.zeros((1, 3)))

    def test_inconsistent_chain_rejected(self):
        with pytest.raises(ValueError, match="layer 1"):
            Network([identity_layer([[1.0]], [0.0]), identity_layer([[1.0, 1.0]], [0.0])])

    def test_softmax_only_final(self):
        sm = DenseLayer(np.eye(2), np.zeros(2), Activation.SOFTMAX)
        with pytest.raises(ValueError, match="softmax"):
            Network([sm, identity_layer(np.eye(2), np.zeros(2))])


class TestBackward:
    def test_identity_chain_rule(self):
        net = Network([identity_layer([[1.0]], [0.0])])
        trace = forward(net, np.array([[5.0]]))
        _, input_error = backward(net, trace, output_grad=np.array([[3.0]]))
        np.testing.assert_array_equal(input_error, [[3.0]])

    def test_two_layer_transposed_product(self):
        w1 = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 0.0]])
        w2 = np.array([[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]])
        net = Network([identity_layer(w1, np.zeros(3)), identity_layer(w2, np.zeros(2))])
        trace = forward(net, np.array([[1.0, -1.0]]))
        g = np.array([[1.0, 2.0]])
        _, input_error = backward(net, trace, output_grad=g)
        expected = g @ w2 @ w1  # (W1^T W2^T g)^T row form
        np.testing.assert_array_equal(input_error, expected)
        np.testing.assert_array_equal(input_error, [[4.0, 11.0]])

    def test_first_layer_error_has_no_derivative_factor(self):
        # A square sigmoid layer: the naive recurrence would multiply by
        # sigma'(something); the input error must be the bare product.
        rng = np.random.default_rng(2)
        net = network([2, 2], [Activation.SIGMOID], rng)
        x = rng.standard_normal((3, 2))
        trace = forward(net, x)
        g = rng.standard_normal((3, 2))
        deltas, input_error = backward(net, trace, output_grad=g)
        bare = deltas[0] @ net.layers[0].weights
        np.testing.assert_array_equal(input_error, bare)
        naive = bare * Activation.SIGMOID.derivative(trace.inputs)
        assert not np.allclose(naive, input_error)
        # finite differences w.r.t. the raw input agree with the bare product
        def loss_of_input(flat):
            t = forward(net, flat.reshape(x.shape))
            return float((t.output * g).sum() / 1.0)
        fd = central_diff(loss_of_input, x.ravel(), h=1e-6).reshape(x.shape)
        np.testing.assert_allclose(input_error, fd, rtol=1e-6, atol=1e-9)

    def test_softmax_requires_combined_delta(self):
        rng = np.random.default_rng(3)
        net = network([3, 2], [Activation.SOFTMAX], rng)
        trace = forward(net, rng.standard_normal((2, 3)))
        with pytest.raises(ValueError, match="last_delta"):
            backward(net, trace, output_grad=np.ones((2, 2)))

    def test_trace_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        net = network([3, 4, 2], [Activation.TANH, Activation.IDENTITY], rng)
        other = network([3, 5, 2], [Activation.TANH, Activation.IDENTITY], rng)
        trace = forward(other, rng.standard_normal((2, 3)))
        with pytest.raises(ValueError, match="layer"):
            backward(net, trace, output_grad=np.ones((2, 2)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference_agreement(self, seed):
        """Random small nets: every weight, bias and input gradient matches
        central differences (step 1e-4) within rtol 1e-5."""
        rng = np.random.default_rng(seed)
        sizes = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(2, 4)) + 1)]
        acts = [
            [Activation.TANH, Activation.SIGMOID, Activation.IDENTITY][int(rng.integers(3))]
            for _ in range(len(sizes) - 1)
        ]
        net = network(sizes, acts, rng)
        x = rng.standard_normal((3, sizes[0]))
        c = rng.standard_normal(sizes[-1])

        def loss_from_params(flat):
            net_set_flat_params(net, flat)
            t = forward(net, x)
            return float((t.output * c).mean(axis=0).sum())

        theta0 = net_flat_params(net)
        trace = forward(net, x)
        per_sample_grad = np.broadcast_to(c / x.shape[0], trace.output.shape)
        deltas, input_error = backward(net, trace, output_grad=per_sample_grad * x.shape[0])
        grads = nncore.gradients(net, deltas, trace)
        analytic = np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])
        fd = central_diff(loss_from_params, theta0, h=1e-4)
        net_set_flat_params(net, theta0)
        np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-7)

        def loss_from_input(flat):
            t = forward(net, flat.reshape(x.shape))
            return float((t.output * c).mean(axis=0).sum())

        fd_in = central_diff(loss_from_input, x.ravel(), h=1e-4).reshape(x.shape)
        np.testing.assert_allclose(input_error / x.shape[0], fd_in, rtol=1e-5, atol=1e-7)


class TestSGD:
    def test_zero_deltas_leave_network_unchanged(self):
        rng = np.random.default_rng(5)
        net = network([2, 3, 2], [Activation.TANH, Activation.IDENTITY], rng)
        before = net_flat_params(net)
        trace = forward(net, rng.standard_normal((4, 2)))
        deltas = [np.zeros_like(z) for z in trace.pre_activations]
        sgd_step(net, deltas, trace, eta=0.5)
        np.testing.assert_array_equal(net_flat_params(net), before)

    def test_scalar_update(self):
        net = Network([identity_layer([[1.0]], [0.0])])
        trace = forward(net, np.array([[3.0]]))
        sgd_step(net, [np.array([[2.0]])], trace, eta=0.1)
        np.testing.assert_allclose(net.layers[0].weights, [[0.4]], rtol=1e-15)
        np.testing.assert_allclose(net.layers[0].biases, [-0.2], rtol=1e-15)

    def test_step_decreases_convex_quadratic(self):
        rng = np.random.default_rng(6)
        net = network([3, 4, 2], [Activation.IDENTITY, Activation.IDENTITY], rng)
        x = rng.standard_normal((8, 3))
        target = rng.standard_normal((8, 2))

        def loss():
            return float(((forward(net, x).output - target) ** 2).sum(axis=1).mean() / 2)

        before = loss()
        trace = forward(net, x)
        deltas, _ = backward(net, trace, output_grad=trace.output - target)
        sgd_step(net, deltas, trace, eta=0.01)
        assert loss() < before

    def test_learning_rate_must_be_positive(self):
        net = Network([identity_layer([[1.0]], [0.0])])
        trace = forward(net, np.array([[1.0]]))
        with pytest.raises(ValueError):
            sgd_step(net, [np.array([[1.0]])], trace, eta=0.0)


class TestDeterminismAndFiniteness:
    def test_identical_seeds_bit_identical(self):
        a = network([4, 6, 3], [Activation.RELU, Activation.SOFTMAX], np.random.default_rng(11))
        b = network([4, 6, 3], [Activation.RELU, Activation.SOFTMAX], np.random.default_rng(11))
        x = np.random.default_rng(1).standard_normal((5, 4))
        ta, tb = forward(a, x), forward(b, x)
        for za, zb in zip(ta.pre_activations, tb.pre_activations):
            np.testing.assert_array_equal(za, zb)
        for aa, ab in zip(ta.activations, tb.activations):
            np.testing.assert_array_equal(aa, ab)

    def test_relu_derivative_zero_at_zero(self):
        z = np.array([[-1.0, 0.0, 2.0]])
        np.testing.assert_array_equal(Activation.RELU.derivative(z), [[0.0, 0.0, 1.0]])

    def test_all_activations_finite_on_finite_inputs(self):
        z = np.array([[-50.0, -1.0, 0.0, 1.0, 50.0]])
        for act in Activation:
            assert np.isfinite(act.apply(z)).all()

    def test_initialization_scale(self):
        rng = np.random.default_rng(7)
        layer = nncore.dense(100, 200, Activation.IDENTITY, rng)
        limit = 1.0 / np.sqrt(100)
        assert np.abs(layer.weights).max() <= limit
        np.testing.assert_array_equal(layer.biases, np.zeros(200))


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        net = network([3, 5, 4], [Activation.SIGMOID, Activation.SOFTMAX], rng)
        path = tmp_path / "net.innet"
        save_network(net, path)
        loaded = load_network(path)
        assert loaded.layer_count == net.layer_count
        for la, lb in zip(net.layers, loaded.layers):
            np.testing.assert_array_equal(la.weights, lb.weights)
            np.testing.assert_array_equal(la.biases, lb.biases)
            assert la.activation is lb.activation

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "junk.innet"
        path.write_bytes(b"NOTNET" + b"\x00" * 16)
        with pytest.raises(ValueError, match="INNET1"):
            load_network(path)

    def test_clone_is_independent(self):
        rng = np.random.default_rng(9)
        net = network([2, 3], [Activation.TANH], rng)
        twin = clone_network(net)
        twin.layers[0].weights += 1.0
        assert not np.allclose(net.layers[0].weights, twin.layers[0].weights)
