"""Minimal dense neural-network engine.

Forward passes record every intermediate value, backward passes return the
per-layer error vectors, and SGD consumes both. The backward recurrence
multiplies the transported error by the activation derivative at every
layer it owns, but the error reported for the *input* of the first layer
is the plain transposed-weight product with no derivative factor: that is
the quantity a downstream network ships back to an upstream one when two
networks are chained over a link.

All arithmetic is float64. Arrays are batch-first: activations are
``[batch, width]`` and weights are ``[fan_out, fan_in]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

Tensor = np.ndarray

CHECKPOINT_MAGIC = b"INNET1"


class Activation(Enum):
    IDENTITY = "identity"
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTMAX = "softmax"

    def apply(self, z: Tensor) -> Tensor:
        if self is Activation.IDENTITY:
            return z
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        if self is Activation.SIGMOID:
            return _sigmoid(z)
        if self is Activation.TANH:
            return np.tanh(z)
        if self is Activation.SOFTMAX:
            shifted = z - z.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            return e / e.sum(axis=1, keepdims=True)
        raise AssertionError(self)

    def derivative(self, z: Tensor) -> Tensor:
        """Elementwise derivative at pre-activation z. ReLU'(0) is 0."""
        if self is Activation.IDENTITY:
            return np.ones_like(z)
        if self is Activation.RELU:
            return (z > 0.0).astype(np.float64)
        if self is Activation.SIGMOID:
            s = _sigmoid(z)
            return s * (1.0 - s)
        if self is Activation.TANH:
            t = np.tanh(z)
            return 1.0 - t * t
        if self is Activation.SOFTMAX:
            raise ValueError(
                "softmax has no elementwise derivative; pass the combined "
                "softmax/log-loss delta to backward(last_delta=...)"
            )
        raise AssertionError(self)


def _sigmoid(z: Tensor) -> Tensor:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[neg])
    out[neg] = ez / (1.0 + ez)
    return out


@dataclass
class DenseLayer:
    weights: Tensor  # [fan_out, fan_in]
    biases: Tensor  # [fan_out]
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.biases.shape} inconsistent with "
                f"fan_out {self.weights.shape[0]}"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def param_count(self) -> int:
        return self.weights.size + self.biases.size


@dataclass
class Network:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for k in range(1, len(self.layers)):
            if self.layers[k].fan_in != self.layers[k - 1].fan_out:
                raise ValueError(
                    f"layer {k} fan_in {self.layers[k].fan_in} != "
                    f"layer {k - 1} fan_out {self.layers[k - 1].fan_out}"
                )
        for k, layer in enumerate(self.layers[:-1]):
            if layer.activation is Activation.SOFTMAX:
                raise ValueError(f"softmax only permitted on the final layer (layer {k})")

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, kept for the backward pass."""

    inputs: Tensor  # [batch, in_dim]
    pre_activations: list[Tensor] = field(default_factory=list)
    activations: list[Tensor] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    @property
    def output(self) -> Tensor:
        return self.activations[-1]


def uniform_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def dense(fan_in: int, fan_out: int, activation: Activation, rng: np.random.Generator) -> DenseLayer:
    return DenseLayer(
        weights=uniform_init(fan_in, fan_out, rng),
        biases=np.zeros(fan_out),
        activation=activation,
    )


def network(sizes: list[int], activations: list[Activation], rng: np.random.Generator) -> Network:
    """Build a net with layer widths sizes[0] -> sizes[1] -> ... -> sizes[-1]."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per weight layer")
    layers = [
        dense(sizes[k], sizes[k + 1], activations[k], rng) for k in range(len(sizes) - 1)
    ]
    return Network(layers)


def forward(net: Network, x: Tensor) -> ForwardTrace:
    """Run the batch through every layer, recording all intermediates."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"input must be [batch, features], got shape {x.shape}")
    if x.shape[1] != net.in_dim:
        raise ValueError(f"layer 0 expects fan_in {net.in_dim}, got {x.shape[1]}")
    trace = ForwardTrace(inputs=x)
    a = x
    for layer in net.layers:
        z = a @ layer.weights.T + layer.biases
        a = layer.activation.apply(z)
        trace.pre_activations.append(z)
        trace.activations.append(a)
    return trace


def backward(
    net: Network,
    trace: ForwardTrace,
    output_grad: Tensor | None = None,
    last_delta: Tensor | None = None,
) -> tuple[list[Tensor], Tensor]:
    """Compute per-layer error vectors and the error at the network input.

    ``output_grad`` is the per-sample gradient of the loss w.r.t. the final
    activation vector; the final layer's delta multiplies it by the
    activation derivative at the last pre-activation. A softmax output has
    no elementwise derivative, so callers pair it with log-loss and pass
    the jointly computed ``last_delta`` (gradient w.r.t. the final
    pre-activation) instead. Hidden deltas chain the transposed-weight
    product with the local activation derivative; the returned input error
    is the bare transposed-weight product, with no derivative factor.
    """
    n_layers = net.layer_count
    _check_trace(net, trace)
    if (output_grad is None) == (last_delta is None):
        raise ValueError("pass exactly one of output_grad or last_delta")
    if last_delta is not None:
        delta = np.asarray(last_delta, dtype=np.float64)
        if delta.shape != trace.pre_activations[-1].shape:
            raise ValueError("last_delta shape does not match the final layer")
    else:
        output_grad = np.asarray(output_grad, dtype=np.float64)
        if output_grad.shape != trace.activations[-1].shape:
            raise ValueError("output_grad shape does not match the final activation")
        delta = output_grad * net.layers[-1].activation.derivative(trace.pre_activations[-1])
    deltas: list[Tensor] = [None] * n_layers  # type: ignore[list-item]
    deltas[-1] = delta
    for k in range(n_layers - 2, -1, -1):
        propagated = deltas[k + 1] @ net.layers[k + 1].weights
        deltas[k] = propagated * net.layers[k].activation.derivative(trace.pre_activations[k])
    input_error = deltas[0] @ net.layers[0].weights
    return deltas, input_error


def _check_trace(net: Network, trace: ForwardTrace) -> None:
    if len(trace.activations) != net.layer_count or len(trace.pre_activations) != net.layer_count:
        raise ValueError("trace length does not match the network layer count")
    for k, layer in enumerate(net.layers):
        if trace.activations[k].shape[1] != layer.fan_out:
            raise ValueError(f"trace width at layer {k} does not match fan_out {layer.fan_out}")


def sgd_step(net: Network, deltas: list[Tensor], trace: ForwardTrace, eta: float) -> Network:
    """One SGD update from per-sample deltas; gradients are mini-batch means."""
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    if len(deltas) != net.layer_count:
        raise ValueError("one delta per layer required")
    b = trace.batch_size
    for k, layer in enumerate(net.layers):
        a_prev = trace.inputs if k == 0 else trace.activations[k - 1]
        layer.weights -= eta * (deltas[k].T @ a_prev) / b
        layer.biases -= eta * deltas[k].mean(axis=0)
    return net


def gradients(net: Network, deltas: list[Tensor], trace: ForwardTrace) -> list[tuple[Tensor, Tensor]]:
    """Mini-batch mean (weight, bias) gradients from per-sample deltas."""
    b = trace.batch_size
    grads = []
    for k in range(net.layer_count):
        a_prev = trace.inputs if k == 0 else trace.activations[k - 1]
        grads.append(((deltas[k].T @ a_prev) / b, deltas[k].mean(axis=0)))
    return grads


def apply_gradients(net: Network, grads: list[tuple[Tensor, Tensor]], eta: float) -> None:
    for layer, (dw, db) in zip(net.layers, grads):
        layer.weights -= eta * dw
        layer.biases -= eta * db


def clone_network(net: Network) -> Network:
    return Network(
        [
            DenseLayer(layer.weights.copy(), layer.biases.copy(), layer.activation)
            for layer in net.layers
        ]
    )


_ACTIVATION_TAGS = {act: i for i, act in enumerate(Activation)}
_TAG_ACTIVATIONS = {i: act for act, i in _ACTIVATION_TAGS.items()}


def save_network(net: Network, path) -> None:
    """Write the versioned flat checkpoint record."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<i", net.layer_count))
        for layer in net.layers:
            fh.write(struct.pack("<iii", layer.fan_in, layer.fan_out, _ACTIVATION_TAGS[layer.activation]))
            fh.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint")
        (n_layers,) = struct.unpack("<i", fh.read(4))
        layers = []
        for _ in range(n_layers):
            fan_in, fan_out, tag = struct.unpack("<iii", fh.read(12))
            w = np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_out, fan_in)
            b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8")
            layers.append(DenseLayer(w.copy(), b.copy(), _TAG_ACTIVATIONS[tag]))
    return Network(layers)
