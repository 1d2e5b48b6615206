"""Star-topology training and inference with every message byte-metered.

Forward: each node encodes its mini-batch and sends the code as an
activation message; the fusion node concatenates them vertically in node-id
order, finishes the forward pass, and scores the objective. Backward: the
fusion node splits its input-layer error horizontally into per-node slices
and sends each slice back; every node composes the slice with its locally
known rate gradient and updates its own parameters. Nodes never see the
labels, each other's codes, or the fusion parameters; the fusion node never
sees raw features. Transport is an in-process message log with a total
order fixed by (round, direction, node id), so runs are reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import nncore
from .losses import LossBreakdown, inl_loss, rate_term
from .nncore import Tensor, forward
from .stack import (
    EncoderNode,
    FusionNode,
    INLStack,
    apply_stack_updates,
    epoch_plan,
    fusion_backward,
    fusion_forward,
    node_encode,
    node_gradient_deltas,
    node_mean_code,
)

DEFAULT_S_BITS = 32


class ProtocolError(RuntimeError):
    pass


class MessageKind(Enum):
    ACTIVATION = "activation"
    ERROR = "error"
    PREDICTION_REQUEST = "prediction_request"
    SOFT_PREDICTION = "soft_prediction"
    PARAMS = "params"


@dataclass
class Message:
    kind: MessageKind
    node_id: int
    direction: str  # "fwd" | "bwd"
    elements: int
    bits: int
    epoch: int = 0
    batch: int = 0
    payload: Tensor | None = None


@dataclass
class MessageLog:
    records: list[Message] = field(default_factory=list)

    def log(self, msg: Message) -> None:
        self.records.append(msg)

    def total_bits(self, direction: str | None = None, kind: MessageKind | None = None) -> int:
        return sum(
            m.bits
            for m in self.records
            if (direction is None or m.direction == direction)
            and (kind is None or m.kind is kind)
        )

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "batch", "direction", "node", "elements", "bits"])
            for m in self.records:
                writer.writerow([m.epoch, m.batch, m.direction, m.node_id, m.elements, m.bits])


@dataclass(frozen=True)
class Quantizer:
    """Uniform fixed-width quantizer; bits=None means off (lossless).

    Off mode is still byte-accounted at the configured parameter width, so
    switching it on only changes numerics and per-element bits, never the
    message structure.
    """

    bits: int | None = None
    lo: float = -8.0
    hi: float = 8.0

    def apply(self, x: Tensor, s_bits: int) -> tuple[Tensor, int]:
        """Return (transported payload, bits per element)."""
        if self.bits is None:
            return x, s_bits
        levels = (1 << self.bits) - 1
        clipped = np.clip(x, self.lo, self.hi)
        step = (self.hi - self.lo) / levels
        q = np.round((clipped - self.lo) / step)
        return self.lo + q * step, self.bits


@dataclass
class MeterReport:
    total_bits: int
    by_direction: dict[str, int]
    by_kind: dict[str, int]


def meter(messages) -> MeterReport:
    """Sum payload bits grouped by direction and message kind."""
    records = messages.records if isinstance(messages, MessageLog) else list(messages)
    by_direction: dict[str, int] = {}
    by_kind: dict[str, int] = {}
    total = 0
    for m in records:
        total += m.bits
        by_direction[m.direction] = by_direction.get(m.direction, 0) + m.bits
        by_kind[m.kind.value] = by_kind.get(m.kind.value, 0) + m.bits
    return MeterReport(total_bits=total, by_direction=by_direction, by_kind=by_kind)


@dataclass
class EpochMetrics:
    loss: LossBreakdown
    bits_forward: int
    bits_backward: int
    batches: int

    @property
    def bits_total(self) -> int:
        return self.bits_forward + self.bits_backward


def _send(
    log: MessageLog | None,
    kind: MessageKind,
    node_id: int,
    direction: str,
    payload: Tensor,
    bits_per_element: int,
    epoch: int,
    batch: int,
) -> Tensor:
    if log is not None:
        log.log(
            Message(
                kind=kind,
                node_id=node_id,
                direction=direction,
                elements=payload.size,
                bits=payload.size * bits_per_element,
                epoch=epoch,
                batch=batch,
            )
        )
    return payload


def _check_star(nodes: list[EncoderNode], fusion: FusionNode) -> None:
    widths = [node.latent_dim for node in nodes]
    if sum(widths) != fusion.input_width:
        raise ProtocolError(
            f"last-layer sizes {widths} sum to {sum(widths)} but the fusion "
            f"input layer has width {fusion.input_width}"
        )
    if len(fusion.heads) != len(nodes):
        raise ProtocolError("one marginal head per node required")


def train_epoch(
    nodes: list[EncoderNode],
    fusion: FusionNode,
    batch_size: int,
    eta: float,
    s: float,
    rng: np.random.Generator,
    log: MessageLog | None = None,
    quantizer: Quantizer | None = None,
    s_bits: int = DEFAULT_S_BITS,
    shuffle: bool = True,
    epoch: int = 0,
    sample_count: int = 1,
) -> EpochMetrics:
    """One synchronous training epoch over the nodes' aligned shards.

    With sample_count > 1 each mini-batch is exchanged once per noise draw
    and the resulting gradients are averaged before the single update.
    """
    _check_star(nodes, fusion)
    y = fusion.labels
    if y is None:
        raise ProtocolError("fusion node has no label shard")
    n = y.shape[0]
    for node in nodes:
        if node.shard is None:
            raise ProtocolError(f"node {node.node_id} has no data shard")
        if node.shard.shape[0] != n:
            raise ProtocolError(
                f"node {node.node_id} shard has {node.shard.shape[0]} samples, labels have {n}"
            )
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    # Link capacity is enforced only through quantization: an explicit
    # quantizer wins, otherwise each node's capacity_bits (when set) caps its
    # own link and everything else passes through losslessly.
    per_node_quantizer = {
        node.node_id: (
            quantizer
            if quantizer is not None
            else (Quantizer(bits=node.capacity_bits) if node.capacity_bits else Quantizer())
        )
        for node in nodes
    }
    stack = INLStack(nodes, fusion)
    widths = stack.slice_widths
    bits_fwd = bits_bwd = 0
    seen = 0
    joint_sum = total_sum = 0.0
    marg_sum = np.zeros(len(nodes))
    rate_sum = np.zeros(len(nodes))

    def one_draw(idx, eps, bi):
        nonlocal bits_fwd, bits_bwd
        y_b = y[idx]
        nfs = []
        payloads = []
        for node, eps_j in zip(nodes, eps):
            nf = node_encode(node, node.shard[idx], eps_j)
            nfs.append(nf)
            sent, bpe = per_node_quantizer[node.node_id].apply(nf.enc.u, s_bits)
            payloads.append(
                _send(log, MessageKind.ACTIVATION, node.node_id, "fwd", sent, bpe, epoch, bi)
            )
            bits_fwd += sent.size * bpe
        u_concat = np.concatenate(payloads, axis=1)
        ff = fusion_forward(fusion, u_concat)
        rates = [rate_term(nf.enc, node.prior) for node, nf in zip(nodes, nfs)]
        breakdown = inl_loss(ff.joint, ff.marginals, rates, y_b, s)
        trunk_deltas, head_deltas, input_error = fusion_backward(fusion, ff, y_b, s)
        node_parts = []
        offset = 0
        for node, nf in zip(nodes, nfs):
            w = node.latent_dim
            err_slice = input_error[:, offset : offset + w]
            sent, bpe = per_node_quantizer[node.node_id].apply(err_slice, s_bits)
            _send(log, MessageKind.ERROR, node.node_id, "bwd", sent, bpe, epoch, bi)
            bits_bwd += sent.size * bpe
            node_parts.append(node_gradient_deltas(node, nf, sent, s))
            offset += w
        return breakdown, trunk_deltas, head_deltas, node_parts, nfs, ff

    for bi, (idx, eps) in enumerate(epoch_plan(rng, n, batch_size, widths, shuffle)):
        b = idx.shape[0]
        if sample_count == 1:
            breakdown, trunk_deltas, head_deltas, node_parts, nfs, ff = one_draw(idx, eps, bi)
            apply_stack_updates(stack, trunk_deltas, head_deltas, node_parts, nfs, ff, eta)
        else:
            breakdown = _multi_draw_update(
                stack, one_draw, idx, eps, bi, rng, widths, eta, sample_count
            )

        joint_sum += b * breakdown.joint_ll
        total_sum += b * breakdown.total
        marg_sum += b * np.array(breakdown.marginal_ll)
        rate_sum += b * np.array(breakdown.rate)
        seen += b

    loss = LossBreakdown(
        joint_ll=joint_sum / seen,
        marginal_ll=list(marg_sum / seen),
        rate=list(rate_sum / seen),
        s=s,
        total=total_sum / seen,
    )
    n_batches = -(-n // batch_size)
    return EpochMetrics(loss=loss, bits_forward=bits_fwd, bits_backward=bits_bwd, batches=n_batches)


def _multi_draw_update(stack, one_draw, idx, first_eps, bi, rng, widths, eta, sample_count):
    """Average gradients over several noise draws, then update once."""
    nets = [stack.fusion.trunk, *stack.fusion.heads]
    for node in stack.nodes:
        nets.extend([node.trunk, node.mu_head, node.logvar_head])
    grad_sums: list[list[tuple[Tensor, Tensor]]] | None = None
    breakdowns = []
    for draw in range(sample_count):
        eps = first_eps if draw == 0 else [
            rng.standard_normal((idx.shape[0], d)) for d in widths
        ]
        breakdown, trunk_deltas, head_deltas, node_parts, nfs, ff = one_draw(idx, eps, bi)
        breakdowns.append(breakdown)
        per_net = [nncore.gradients(stack.fusion.trunk, trunk_deltas, ff.trace)]
        per_net += [
            nncore.gradients(head, hd, ht)
            for head, hd, ht in zip(stack.fusion.heads, head_deltas, ff.head_traces)
        ]
        for node, (td, md, ld), nf in zip(stack.nodes, node_parts, nfs):
            per_net.append(nncore.gradients(node.trunk, td, nf.trace))
            per_net.append(nncore.gradients(node.mu_head, md, nf.mu_trace))
            per_net.append(nncore.gradients(node.logvar_head, ld, nf.lv_trace))
        if grad_sums is None:
            grad_sums = per_net
        else:
            for acc, new in zip(grad_sums, per_net):
                for k, (dw, db) in enumerate(new):
                    acc[k] = (acc[k][0] + dw, acc[k][1] + db)
    assert grad_sums is not None
    for net, grads in zip(nets, grad_sums):
        nncore.apply_gradients(
            net, [(dw / sample_count, db / sample_count) for dw, db in grads], eta
        )
    return LossBreakdown(
        joint_ll=float(np.mean([b.joint_ll for b in breakdowns])),
        marginal_ll=list(np.mean([b.marginal_ll for b in breakdowns], axis=0)),
        rate=list(np.mean([b.rate for b in breakdowns], axis=0)),
        s=breakdowns[0].s,
        total=float(np.mean([b.total for b in breakdowns])),
    )


def infer(
    nodes: list[EncoderNode],
    fusion: FusionNode,
    x_views: list[Tensor],
    log: MessageLog | None = None,
    s_bits: int = DEFAULT_S_BITS,
    epoch: int = 0,
) -> Tensor:
    """Joint soft prediction from one deterministic code per node.

    Every view is required; inference sends the encoder means, the fusion
    node replies with the joint-head distribution over the classes.
    """
    _check_star(nodes, fusion)
    if len(x_views) != len(nodes):
        raise ProtocolError(f"expected {len(nodes)} views, got {len(x_views)}")
    codes = []
    for node, x in zip(nodes, x_views):
        if x is None:
            raise ProtocolError(f"view for node {node.node_id} unavailable")
        u = node_mean_code(node, x)
        codes.append(_send(log, MessageKind.PREDICTION_REQUEST, node.node_id, "fwd", u, s_bits, epoch, 0))
    u_concat = np.concatenate(codes, axis=1)
    joint = forward(fusion.trunk, u_concat).output
    _send(log, MessageKind.SOFT_PREDICTION, len(nodes) + 1, "bwd", joint, s_bits, epoch, 0)
    return joint


def protocol_accuracy(
    nodes: list[EncoderNode], fusion: FusionNode, x_views: list[Tensor], y: Tensor
) -> float:
    pred = infer(nodes, fusion, x_views).argmax(axis=1)
    return float(np.mean(pred == np.asarray(y)))


def audit_privacy(log: MessageLog, nodes: list[EncoderNode]) -> list[str]:
    """Structural privacy audit of a message log.

    Nodes may only emit activation/prediction messages of their own code
    width and only receive error slices of that same width; the fusion node
    only emits soft predictions. Returns human-readable violations, empty
    when the log is clean.
    """
    widths = {node.node_id: node.latent_dim for node in nodes}
    fusion_id = len(nodes) + 1
    violations = []
    for i, m in enumerate(log.records):
        if m.kind in (MessageKind.ACTIVATION, MessageKind.PREDICTION_REQUEST):
            if m.node_id not in widths:
                violations.append(f"record {i}: forward message from unknown node {m.node_id}")
            elif m.direction != "fwd" or m.elements % widths[m.node_id] != 0:
                violations.append(
                    f"record {i}: node {m.node_id} sent {m.elements} elements, "
                    f"not a multiple of its code width {widths[m.node_id]}"
                )
        elif m.kind is MessageKind.ERROR:
            if m.node_id not in widths:
                violations.append(f"record {i}: error slice for unknown node {m.node_id}")
            elif m.direction != "bwd" or m.elements % widths[m.node_id] != 0:
                violations.append(
                    f"record {i}: error slice for node {m.node_id} has {m.elements} "
                    f"elements, not a multiple of width {widths[m.node_id]}"
                )
        elif m.kind is MessageKind.SOFT_PREDICTION:
            if m.node_id != fusion_id:
                violations.append(f"record {i}: soft prediction not from the fusion node")
        else:
            violations.append(f"record {i}: unexpected {m.kind.value} message in a star log")
    return violations
