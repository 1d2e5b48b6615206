"""Encoder nodes, the fusion node, and glued (whole-graph) training.

An encoder node is a trunk network feeding two identity heads that emit the
mean and log-variance of its Gaussian code; the fusion node is a softmax
trunk over the concatenated codes plus one single-layer softmax head per
node for the marginal predictions. The glued trainer here computes the full
gradient of the objective in one place. The message-passing trainer in
``protocol`` must produce bit-identical parameter updates when quantization
is off; both paths therefore share the same per-component gradient
functions and the same epoch plan, and only differ in how the slices of the
fusion input error travel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import nncore
from .losses import (
    GaussianEncoderOutput,
    LossBreakdown,
    Prior,
    encode_reparam,
    inl_loss,
    rate_gradients,
    rate_term,
)
from .nncore import Activation, ForwardTrace, Network, Tensor, backward, forward, sgd_step


@dataclass
class EncoderNode:
    """One input node: trunk + Gaussian encoder heads + its local view shard."""

    node_id: int
    trunk: Network
    mu_head: Network
    logvar_head: Network
    prior: Prior = field(default_factory=Prior.standard)
    capacity_bits: int | None = None
    shard: Tensor | None = None

    def __post_init__(self):
        if self.mu_head.in_dim != self.trunk.out_dim or self.logvar_head.in_dim != self.trunk.out_dim:
            raise ValueError(f"node {self.node_id}: encoder heads do not match the trunk width")
        if self.mu_head.out_dim != self.logvar_head.out_dim:
            raise ValueError(f"node {self.node_id}: mu and log-var heads disagree on latent width")

    @property
    def latent_dim(self) -> int:
        return self.mu_head.out_dim

    @property
    def feature_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def param_count(self) -> int:
        return self.trunk.param_count + self.mu_head.param_count + self.logvar_head.param_count


@dataclass
class FusionNode:
    """The central decoder: softmax trunk plus per-node marginal heads."""

    trunk: Network
    heads: list[Network]
    labels: Tensor | None = None

    def __post_init__(self):
        if self.trunk.layers[-1].activation is not Activation.SOFTMAX:
            raise ValueError("fusion trunk must end in a softmax layer")
        for j, head in enumerate(self.heads):
            if head.layers[-1].activation is not Activation.SOFTMAX:
                raise ValueError(f"marginal head {j} must end in a softmax layer")
            if head.out_dim != self.trunk.out_dim:
                raise ValueError(f"marginal head {j} class count differs from the trunk")

    @property
    def input_width(self) -> int:
        return self.trunk.in_dim

    @property
    def n_classes(self) -> int:
        return self.trunk.out_dim

    @property
    def param_count(self) -> int:
        return self.trunk.param_count + sum(h.param_count for h in self.heads)


@dataclass
class INLStack:
    """A complete star: J encoder nodes plus the fusion node."""

    nodes: list[EncoderNode]
    fusion: FusionNode

    def __post_init__(self):
        widths = self.slice_widths
        if sum(widths) != self.fusion.input_width:
            raise ValueError(
                f"last-layer sizes {widths} sum to {sum(widths)} but the fusion "
                f"input layer has width {self.fusion.input_width}"
            )
        if len(self.fusion.heads) != len(self.nodes):
            raise ValueError("one marginal head per node required")
        for node, head in zip(self.nodes, self.fusion.heads):
            if head.in_dim != node.latent_dim:
                raise ValueError(f"head for node {node.node_id} does not match its latent width")

    @property
    def slice_widths(self) -> list[int]:
        return [node.latent_dim for node in self.nodes]

    @property
    def param_count(self) -> int:
        return sum(n.param_count for n in self.nodes) + self.fusion.param_count


def encoder_node(
    node_id: int,
    feature_dim: int,
    hidden: list[int],
    latent_dim: int,
    activation: Activation,
    rng: np.random.Generator,
    prior: Prior | None = None,
) -> EncoderNode:
    sizes = [feature_dim] + list(hidden)
    trunk = nncore.network(sizes, [activation] * len(hidden), rng)
    mu_head = nncore.network([sizes[-1], latent_dim], [Activation.IDENTITY], rng)
    logvar_head = nncore.network([sizes[-1], latent_dim], [Activation.IDENTITY], rng)
    return EncoderNode(node_id, trunk, mu_head, logvar_head, prior or Prior.standard())


def fusion_node(
    latent_dims: list[int],
    hidden: list[int],
    n_classes: int,
    activation: Activation,
    rng: np.random.Generator,
) -> FusionNode:
    sizes = [sum(latent_dims)] + list(hidden) + [n_classes]
    trunk = nncore.network(sizes, [activation] * len(hidden) + [Activation.SOFTMAX], rng)
    heads = [
        nncore.network([d, n_classes], [Activation.SOFTMAX], rng) for d in latent_dims
    ]
    return FusionNode(trunk, heads)


def build_stack(
    n_nodes: int,
    feature_dim: int,
    enc_hidden: list[int],
    latent_dim: int,
    fusion_hidden: list[int],
    n_classes: int,
    activation: Activation,
    rng: np.random.Generator,
) -> INLStack:
    """Uniform-architecture stack; node ids run 1..J."""
    nodes = [
        encoder_node(j + 1, feature_dim, enc_hidden, latent_dim, activation, rng)
        for j in range(n_nodes)
    ]
    fusion = fusion_node([latent_dim] * n_nodes, fusion_hidden, n_classes, activation, rng)
    return INLStack(nodes, fusion)


@dataclass
class NodeForward:
    trace: ForwardTrace
    mu_trace: ForwardTrace
    lv_trace: ForwardTrace
    enc: GaussianEncoderOutput


@dataclass
class FusionForward:
    trace: ForwardTrace
    head_traces: list[ForwardTrace]

    @property
    def joint(self) -> Tensor:
        return self.trace.output

    @property
    def marginals(self) -> list[Tensor]:
        return [t.output for t in self.head_traces]


def node_encode(node: EncoderNode, x: Tensor, eps: Tensor) -> NodeForward:
    trace = forward(node.trunk, x)
    mu_trace = forward(node.mu_head, trace.output)
    lv_trace = forward(node.logvar_head, trace.output)
    enc = encode_reparam(mu_trace.output, lv_trace.output, eps=eps)
    return NodeForward(trace, mu_trace, lv_trace, enc)


def node_mean_code(node: EncoderNode, x: Tensor) -> Tensor:
    """Deterministic code for inference: the encoder mean."""
    h = forward(node.trunk, x).output
    return forward(node.mu_head, h).output


def fusion_forward(fusion: FusionNode, u_concat: Tensor) -> FusionForward:
    trace = forward(fusion.trunk, u_concat)
    head_traces = []
    offset = 0
    for head in fusion.heads:
        w = head.in_dim
        head_traces.append(forward(head, u_concat[:, offset : offset + w]))
        offset += w
    return FusionForward(trace, head_traces)


def fusion_backward(
    fusion: FusionNode, ff: FusionForward, y: Tensor, s: float
) -> tuple[list[Tensor], list[list[Tensor]], Tensor]:
    """Per-sample deltas for trunk and heads, plus the full input-layer error.

    The returned input error is the gradient of the per-sample minimized
    loss w.r.t. the concatenated codes, including the marginal-head
    contributions; it is everything the fusion node knows and exactly what
    gets split into per-node error slices.
    """
    b = y.shape[0]
    onehot = np.zeros_like(ff.joint)
    onehot[np.arange(b), y] = 1.0
    trunk_deltas, input_error = backward(fusion.trunk, ff.trace, last_delta=ff.joint - onehot)
    head_deltas: list[list[Tensor]] = []
    offset = 0
    for head, ht in zip(fusion.heads, ff.head_traces):
        w = head.in_dim
        hd, herr = backward(head, ht, last_delta=s * (ht.output - onehot))
        input_error[:, offset : offset + w] += herr
        head_deltas.append(hd)
        offset += w
    return trunk_deltas, head_deltas, input_error


def node_gradient_deltas(
    node: EncoderNode, nf: NodeForward, err_slice: Tensor, s: float
) -> tuple[list[Tensor], list[Tensor], list[Tensor]]:
    """Compose the received error slice with the locally known rate gradient.

    ``err_slice`` is the per-sample gradient of the minimized loss w.r.t.
    this node's transmitted code; the rate correction and the
    reparametrization chain stay local because only this node knows its
    prior and noise draw.
    """
    enc = nf.enc
    half_sigma_eps = 0.5 * np.exp(enc.log_var / 2.0) * enc.eps
    if s != 0.0:
        g_u, g_mu, g_lv = rate_gradients(enc, node.prior)
        grad_u = err_slice + s * g_u
        grad_mu = grad_u + s * g_mu
        grad_lv = grad_u * half_sigma_eps + s * g_lv
    else:
        grad_u = err_slice
        grad_mu = grad_u
        grad_lv = grad_u * half_sigma_eps
    mu_deltas, mu_err = backward(node.mu_head, nf.mu_trace, output_grad=grad_mu)
    lv_deltas, lv_err = backward(node.logvar_head, nf.lv_trace, output_grad=grad_lv)
    trunk_deltas, _ = backward(node.trunk, nf.trace, output_grad=mu_err + lv_err)
    return trunk_deltas, mu_deltas, lv_deltas


def apply_stack_updates(
    stack: INLStack,
    trunk_deltas: list[Tensor],
    head_deltas: list[list[Tensor]],
    node_parts: list[tuple[list[Tensor], list[Tensor], list[Tensor]]],
    nfs: list[NodeForward],
    ff: FusionForward,
    eta: float,
) -> None:
    """Apply all updates after every delta is computed (no read-after-write)."""
    sgd_step(stack.fusion.trunk, trunk_deltas, ff.trace, eta)
    for head, hd, ht in zip(stack.fusion.heads, head_deltas, ff.head_traces):
        sgd_step(head, hd, ht, eta)
    for node, (td, md, ld), nf in zip(stack.nodes, node_parts, nfs):
        sgd_step(node.trunk, td, nf.trace, eta)
        sgd_step(node.mu_head, md, nf.mu_trace, eta)
        sgd_step(node.logvar_head, ld, nf.lv_trace, eta)


def stack_forward(
    stack: INLStack, x_views: list[Tensor], eps_list: list[Tensor]
) -> tuple[list[NodeForward], FusionForward]:
    nfs = [
        node_encode(node, x, eps)
        for node, x, eps in zip(stack.nodes, x_views, eps_list)
    ]
    u_concat = np.concatenate([nf.enc.u for nf in nfs], axis=1)
    return nfs, fusion_forward(stack.fusion, u_concat)


def stack_objective(
    stack: INLStack, x_views: list[Tensor], y: Tensor, s: float, eps_list: list[Tensor]
) -> LossBreakdown:
    """Evaluate the objective without touching any parameter."""
    nfs, ff = stack_forward(stack, x_views, eps_list)
    rates = [rate_term(nf.enc, node.prior) for node, nf in zip(stack.nodes, nfs)]
    return inl_loss(ff.joint, ff.marginals, rates, y, s)


def train_step_monolithic(
    stack: INLStack,
    x_views: list[Tensor],
    y: Tensor,
    s: float,
    eta: float,
    eps_list: list[Tensor],
) -> LossBreakdown:
    """One glued full-gradient step: the reference the protocol must match."""
    nfs, ff = stack_forward(stack, x_views, eps_list)
    rates = [rate_term(nf.enc, node.prior) for node, nf in zip(stack.nodes, nfs)]
    breakdown = inl_loss(ff.joint, ff.marginals, rates, y, s)
    trunk_deltas, head_deltas, input_error = fusion_backward(stack.fusion, ff, y, s)
    node_parts = []
    offset = 0
    for node, nf in zip(stack.nodes, nfs):
        w = node.latent_dim
        err_slice = input_error[:, offset : offset + w]
        node_parts.append(node_gradient_deltas(node, nf, err_slice, s))
        offset += w
    apply_stack_updates(stack, trunk_deltas, head_deltas, node_parts, nfs, ff, eta)
    return breakdown


def epoch_plan(
    rng: np.random.Generator,
    n: int,
    batch_size: int,
    latent_dims: list[int],
    shuffle: bool = True,
) -> Iterator[tuple[Tensor, list[Tensor]]]:
    """Yield (indices, per-node eps) per mini-batch.

    Both the protocol trainer and the glued reference iterate this, so a
    shared generator state produces identical permutations and noise draws
    in identical order (batches ascending, nodes ascending).
    """
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        eps = [rng.standard_normal((idx.shape[0], d)) for d in latent_dims]
        yield idx, eps


def train_epoch_reference(
    stack: INLStack,
    batch_size: int,
    eta: float,
    s: float,
    rng: np.random.Generator,
    shuffle: bool = True,
) -> LossBreakdown:
    """Glued-training twin of protocol.train_epoch with identical rng use."""
    x_shards = [node.shard for node in stack.nodes]
    y = stack.fusion.labels
    if y is None or any(x is None for x in x_shards):
        raise ValueError("attach shards to the nodes and labels to the fusion node first")
    n = y.shape[0]
    joint_sum = total_sum = 0.0
    marg = np.zeros(len(stack.nodes))
    rate = np.zeros(len(stack.nodes))
    seen = 0
    for idx, eps in epoch_plan(rng, n, batch_size, stack.slice_widths, shuffle):
        xb = [x[idx] for x in x_shards]
        breakdown = train_step_monolithic(stack, xb, y[idx], s, eta, eps)
        b = idx.shape[0]
        joint_sum += b * breakdown.joint_ll
        total_sum += b * breakdown.total
        marg += b * np.array(breakdown.marginal_ll)
        rate += b * np.array(breakdown.rate)
        seen += b
    return LossBreakdown(
        joint_ll=joint_sum / seen,
        marginal_ll=list(marg / seen),
        rate=list(rate / seen),
        s=s,
        total=total_sum / seen,
    )


def predict_joint(stack: INLStack, x_views: list[Tensor]) -> Tensor:
    """Joint-head distribution from deterministic (mean) codes."""
    codes = [node_mean_code(node, x) for node, x in zip(stack.nodes, x_views)]
    u_concat = np.concatenate(codes, axis=1)
    return forward(stack.fusion.trunk, u_concat).output


def accuracy(stack: INLStack, x_views: list[Tensor], y: Tensor) -> float:
    pred = predict_joint(stack, x_views).argmax(axis=1)
    return float(np.mean(pred == np.asarray(y)))


def iter_networks(stack: INLStack) -> Iterator[tuple[str, Network]]:
    """Stable, named ordering over every network in the stack."""
    yield "fusion_trunk", stack.fusion.trunk
    for j, head in enumerate(stack.fusion.heads):
        yield f"head{j + 1}", head
    for node in stack.nodes:
        yield f"node{node.node_id}_trunk", node.trunk
        yield f"node{node.node_id}_mu", node.mu_head
        yield f"node{node.node_id}_logvar", node.logvar_head


def param_vector(stack: INLStack) -> Tensor:
    chunks = []
    for _, net in iter_networks(stack):
        for layer in net.layers:
            chunks.append(layer.weights.ravel())
            chunks.append(layer.biases.ravel())
    return np.concatenate(chunks)


def set_param_vector(stack: INLStack, vec: Tensor) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (stack.param_count,):
        raise ValueError(f"expected {stack.param_count} parameters, got {vec.shape}")
    offset = 0
    for _, net in iter_networks(stack):
        for layer in net.layers:
            w = layer.weights.size
            layer.weights[:] = vec[offset : offset + w].reshape(layer.weights.shape)
            offset += w
            b = layer.biases.size
            layer.biases[:] = vec[offset : offset + b]
            offset += b


def clone_stack(stack: INLStack) -> INLStack:
    nodes = [
        EncoderNode(
            node.node_id,
            nncore.clone_network(node.trunk),
            nncore.clone_network(node.mu_head),
            nncore.clone_network(node.logvar_head),
            node.prior,
            node.capacity_bits,
            None if node.shard is None else node.shard,
        )
        for node in stack.nodes
    ]
    fusion = FusionNode(
        nncore.clone_network(stack.fusion.trunk),
        [nncore.clone_network(h) for h in stack.fusion.heads],
        stack.fusion.labels,
    )
    return INLStack(nodes, fusion)
