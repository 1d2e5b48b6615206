"""Shared test oracles: finite differences, flat gradients, a softmax-regression
baseline, and tiny stack builders. These stay independent of the code paths
they check."""

import numpy as np

from innet import nncore
from innet.nncore import Activation
from innet.stack import (
    INLStack,
    encoder_node,
    fusion_backward,
    fusion_node,
    node_gradient_deltas,
    param_vector,
    set_param_vector,
    stack_forward,
    stack_objective,
)


def central_diff(f, theta, h=1e-5):
    """Central finite differences of a scalar function over a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        dn = theta.copy()
        dn[i] -= h
        out[i] = (f(up) - f(dn)) / (2.0 * h)
    return out


def net_flat_params(net):
    return np.concatenate(
        [np.concatenate([l.weights.ravel(), l.biases.ravel()]) for l in net.layers]
    )


def net_set_flat_params(net, vec):
    offset = 0
    for layer in net.layers:
        w = layer.weights.size
        layer.weights[:] = vec[offset : offset + w].reshape(layer.weights.shape)
        offset += w
        b = layer.biases.size
        layer.biases[:] = vec[offset : offset + b]
        offset += b


def stack_flat_gradients(stack, x_views, y, s, eps_list):
    """Analytic mean gradient of the minimized objective, flattened in
    iter_networks order (matching param_vector)."""
    nfs, ff = stack_forward(stack, x_views, eps_list)
    trunk_deltas, head_deltas, input_error = fusion_backward(stack.fusion, ff, y, s)
    node_parts = []
    offset = 0
    for node, nf in zip(stack.nodes, nfs):
        w = node.latent_dim
        node_parts.append(node_gradient_deltas(node, nf, input_error[:, offset : offset + w], s))
        offset += w
    pieces = [nncore.gradients(stack.fusion.trunk, trunk_deltas, ff.trace)]
    for head, hd, ht in zip(stack.fusion.heads, head_deltas, ff.head_traces):
        pieces.append(nncore.gradients(head, hd, ht))
    for node, (td, md, ld), nf in zip(stack.nodes, node_parts, nfs):
        pieces.append(nncore.gradients(node.trunk, td, nf.trace))
        pieces.append(nncore.gradients(node.mu_head, md, nf.mu_trace))
        pieces.append(nncore.gradients(node.logvar_head, ld, nf.lv_trace))
    return np.concatenate(
        [np.concatenate([dw.ravel(), db.ravel()]) for grads in pieces for dw, db in grads]
    )


def stack_fd_gradients(stack, x_views, y, s, eps_list, h=1e-5):
    """Finite differences of the minimized objective over every parameter."""
    theta0 = param_vector(stack)

    def objective(vec):
        set_param_vector(stack, vec)
        return -stack_objective(stack, x_views, y, s, eps_list).total

    fd = central_diff(objective, theta0, h)
    set_param_vector(stack, theta0)
    return fd


def tiny_stack(rng, widths=(2, 3), feature_dims=(3, 4), hidden=5, n_classes=2,
               activation=Activation.TANH):
    """Small mixed-width stack; node order defines slice order."""
    nodes = [
        encoder_node(j + 1, feature_dims[j], [hidden], widths[j], activation, rng)
        for j in range(len(widths))
    ]
    fusion = fusion_node(list(widths), [hidden], n_classes, activation, rng)
    return INLStack(nodes, fusion)


def softmax_regression_accuracy(x_train, y_train, x_test, y_test, iters=400, lr=0.5):
    """Plain multinomial logistic regression by gradient descent (oracle)."""
    k = int(max(y_train.max(), y_test.max())) + 1
    xb = np.hstack([x_train, np.ones((x_train.shape[0], 1))])
    w = np.zeros((k, xb.shape[1]))
    onehot = np.zeros((y_train.shape[0], k))
    onehot[np.arange(y_train.shape[0]), y_train] = 1.0
    for _ in range(iters):
        z = xb @ w.T
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (p - onehot).T @ xb / xb.shape[0]
    xt = np.hstack([x_test, np.ones((x_test.shape[0], 1))])
    pred = (xt @ w.T).argmax(axis=1)
    return float(np.mean(pred == y_test))
