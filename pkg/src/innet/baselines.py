"""Federated-averaging and split-learning baselines on the same engine.

Both baselines train the glued architecture with deterministic codes
(u = mu) on the plain joint cross-entropy; the variance heads and marginal
heads stay part of the parameter vector so the bytes exchanged per round
match the full model size. FL clients train in parallel rounds and a
parameter server averages their vectors uniformly; SL clients train
sequentially against a shared server net, handing their client-side
weights to the next client after each local epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import PROB_FLOOR
from .nncore import Network, Tensor, backward, forward, sgd_step
from .protocol import DEFAULT_S_BITS, Message, MessageKind, MessageLog
from .stack import EncoderNode, INLStack, param_vector, set_param_vector


@dataclass
class FLClient:
    client_id: int
    stack: INLStack
    x_views: list[Tensor]
    y: Tensor


@dataclass
class SLClient:
    client_id: int
    branches: list[EncoderNode]
    x_views: list[Tensor]

    @property
    def concat_width(self) -> int:
        return sum(b.latent_dim for b in self.branches)

    @property
    def param_count(self) -> int:
        return sum(b.param_count for b in self.branches)


def _onehot(y: Tensor, k: int) -> Tensor:
    out = np.zeros((y.shape[0], k))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def ce_epoch(
    stack: INLStack,
    x_views: list[Tensor],
    y: Tensor,
    batch_size: int,
    eta: float,
    rng: np.random.Generator,
    shuffle: bool = True,
) -> float:
    """One local cross-entropy epoch with deterministic codes; returns mean CE."""
    n = y.shape[0]
    order = rng.permutation(n) if shuffle else np.arange(n)
    ce_sum = 0.0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        y_b = y[idx]
        b = idx.shape[0]
        trunk_traces, mu_traces = [], []
        for node, x in zip(stack.nodes, x_views):
            t = forward(node.trunk, x[idx])
            trunk_traces.append(t)
            mu_traces.append(forward(node.mu_head, t.output))
        u_concat = np.concatenate([m.output for m in mu_traces], axis=1)
        f_trace = forward(stack.fusion.trunk, u_concat)
        p = f_trace.output
        ce_sum -= float(np.log(np.maximum(p[np.arange(b), y_b], PROB_FLOOR)).sum())
        f_deltas, input_error = backward(
            stack.fusion.trunk, f_trace, last_delta=p - _onehot(y_b, stack.fusion.n_classes)
        )
        node_parts = []
        offset = 0
        for node, t, m in zip(stack.nodes, trunk_traces, mu_traces):
            w = node.latent_dim
            mu_deltas, mu_err = backward(node.mu_head, m, output_grad=input_error[:, offset : offset + w])
            trunk_deltas, _ = backward(node.trunk, t, output_grad=mu_err)
            node_parts.append((trunk_deltas, mu_deltas))
            offset += w
        sgd_step(stack.fusion.trunk, f_deltas, f_trace, eta)
        for node, (td, md), t, m in zip(stack.nodes, node_parts, trunk_traces, mu_traces):
            sgd_step(node.trunk, td, t, eta)
            sgd_step(node.mu_head, md, m, eta)
    return ce_sum / n


def fedavg(vectors: list[Tensor]) -> Tensor:
    """Uniform (unweighted) parameter average."""
    lengths = {v.shape for v in vectors}
    if len(lengths) > 1:
        raise ValueError(f"parameter vectors are not congruent: {sorted(lengths)}")
    return np.mean(np.stack(vectors), axis=0)


def fl_round(
    clients: list[FLClient],
    server_params: Tensor,
    local_epochs: int,
    eta: float,
    batch_size: int,
    rng: np.random.Generator,
    log: MessageLog | None = None,
    s_bits: int = DEFAULT_S_BITS,
    epoch: int = 0,
) -> tuple[Tensor, float]:
    """One FL round: broadcast, local training, uniform average of the vectors.

    Each client moves 2N parameters per round (download plus upload), so a
    round costs exactly 2 * N * J * s_bits metered bits. Per-client noise
    streams are keyed by client id and the average runs in id order, so the
    round is invariant to the ordering of the client list.
    """
    n_params = server_params.shape[0]
    for client in clients:
        if client.stack.param_count != n_params:
            raise ValueError(
                f"client {client.client_id} has {client.stack.param_count} "
                f"parameters, server vector has {n_params}"
            )
    ids = sorted(c.client_id for c in clients)
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    rng_by_id = dict(zip(ids, rng.spawn(len(clients))))
    vectors: dict[int, Tensor] = {}
    ce_sum = 0.0
    for client in clients:
        set_param_vector(client.stack, server_params)
        if log is not None:
            log.log(Message(MessageKind.PARAMS, client.client_id, "bwd", n_params, n_params * s_bits, epoch))
        ce = 0.0
        for _ in range(local_epochs):
            ce = ce_epoch(
                client.stack, client.x_views, client.y, batch_size, eta, rng_by_id[client.client_id]
            )
        ce_sum += ce
        vectors[client.client_id] = param_vector(client.stack)
        if log is not None:
            log.log(Message(MessageKind.PARAMS, client.client_id, "fwd", n_params, n_params * s_bits, epoch))
    new_params = fedavg([vectors[i] for i in ids])
    return new_params, ce_sum / len(clients)


def _client_forward(client: SLClient, idx: Tensor):
    trunk_traces, mu_traces = [], []
    for branch, x in zip(client.branches, client.x_views):
        t = forward(branch.trunk, x[idx])
        trunk_traces.append(t)
        mu_traces.append(forward(branch.mu_head, t.output))
    u_concat = np.concatenate([m.output for m in mu_traces], axis=1)
    return trunk_traces, mu_traces, u_concat


def _client_backward(client, trunk_traces, mu_traces, error: Tensor, eta: float) -> None:
    offset = 0
    for branch, t, m in zip(client.branches, trunk_traces, mu_traces):
        w = branch.latent_dim
        mu_deltas, mu_err = backward(branch.mu_head, m, output_grad=error[:, offset : offset + w])
        trunk_deltas, _ = backward(branch.trunk, t, output_grad=mu_err)
        sgd_step(branch.trunk, trunk_deltas, t, eta)
        sgd_step(branch.mu_head, mu_deltas, m, eta)
        offset += w


def hand_off(src: SLClient, dst: SLClient) -> None:
    """Copy client-side weights src -> dst (a no-op when src is dst)."""
    for b_src, b_dst in zip(src.branches, dst.branches):
        for net_src, net_dst in (
            (b_src.trunk, b_dst.trunk),
            (b_src.mu_head, b_dst.mu_head),
            (b_src.logvar_head, b_dst.logvar_head),
        ):
            for l_src, l_dst in zip(net_src.layers, net_dst.layers):
                l_dst.weights[:] = l_src.weights
                l_dst.biases[:] = l_src.biases


def sl_epoch(
    clients: list[SLClient],
    server_net: Network,
    y_by_client: list[Tensor],
    batch_size: int,
    eta: float,
    rng: np.random.Generator,
    log: MessageLog | None = None,
    s_bits: int = DEFAULT_S_BITS,
    epoch: int = 0,
) -> float:
    """One sequential SL epoch over all clients; labels stay server-side.

    Client k exchanges one activation batch up and one error batch down per
    mini-batch, then hands its client-net weights to client k+1 (wrapping
    to client 0 for the next epoch), so an epoch meters exactly
    (2*p*q + N_client*J) * s_bits bits.
    """
    if not clients:
        raise ValueError("need at least one client")
    ce_sum = 0.0
    total = 0
    for k, (client, y) in enumerate(zip(clients, y_by_client)):
        n = y.shape[0]
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            y_b = y[idx]
            b = idx.shape[0]
            trunk_traces, mu_traces, u_concat = _client_forward(client, idx)
            if log is not None:
                log.log(Message(MessageKind.ACTIVATION, client.client_id, "fwd", u_concat.size, u_concat.size * s_bits, epoch, bi))
            s_trace = forward(server_net, u_concat)
            p = s_trace.output
            ce_sum -= float(np.log(np.maximum(p[np.arange(b), y_b], PROB_FLOOR)).sum())
            total += b
            s_deltas, input_error = backward(server_net, s_trace, last_delta=p - _onehot(y_b, server_net.out_dim))
            if log is not None:
                log.log(Message(MessageKind.ERROR, client.client_id, "bwd", input_error.size, input_error.size * s_bits, epoch, bi))
            sgd_step(server_net, s_deltas, s_trace, eta)
            _client_backward(client, trunk_traces, mu_traces, input_error, eta)
        nxt = clients[(k + 1) % len(clients)]
        hand_off(client, nxt)
        if log is not None:
            log.log(Message(MessageKind.PARAMS, client.client_id, "fwd", client.param_count, client.param_count * s_bits, epoch))
    return ce_sum / total


def sl_predict(client: SLClient, server_net: Network, x_views: list[Tensor]) -> Tensor:
    codes = []
    for branch, x in zip(client.branches, x_views):
        h = forward(branch.trunk, x).output
        codes.append(forward(branch.mu_head, h).output)
    return forward(server_net, np.concatenate(codes, axis=1)).output
