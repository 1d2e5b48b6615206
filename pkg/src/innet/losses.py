"""Variational training objective and its gradient pieces.

The per-batch objective combines a joint log-likelihood from the fusion
classifier, per-node log-likelihoods from the marginal heads, and per-node
rate penalties measuring how far each Gaussian encoder strays from its
prior:

    total = joint_ll + s * sum_j (marginal_ll[j] - rate[j])

``total`` is a likelihood-style quantity that training *maximizes*; the
trainers minimize its negation. All logs are natural; divide by ln 2 for
bits. Encoders sample with the reparametrization identity
``u = mu + exp(log_var / 2) * eps`` so gradients pass through the noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import Tensor

PROB_FLOOR = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


def log_loss(y: int, p_hat: Tensor) -> float:
    """Logarithmic loss -ln p_hat[y] in nats for one prediction."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p_hat.ndim != 1:
        raise ValueError("p_hat must be a probability vector")
    if np.any(p_hat < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(p_hat.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p_hat.sum()!r}, not 1")
    if not 0 <= y < p_hat.size:
        raise ValueError(f"label {y} outside [0, {p_hat.size})")
    return float(-np.log(max(p_hat[y], PROB_FLOOR)))


def relevance(h_y: float, mean_log_loss: float) -> float:
    """Achieved relevance: label entropy minus the mean log-loss (nats)."""
    if h_y < 0:
        raise ValueError("entropy cannot be negative")
    return h_y - mean_log_loss


@dataclass
class GaussianEncoderOutput:
    """One reparametrized draw: u == mu + exp(log_var/2) * eps holds exactly."""

    mu: Tensor
    log_var: Tensor
    eps: Tensor
    u: Tensor


def encode_reparam(
    mu: Tensor,
    log_var: Tensor,
    rng: np.random.Generator | None = None,
    eps: Tensor | None = None,
) -> GaussianEncoderOutput:
    """Sample u = mu + exp(log_var/2) * eps; eps drawn standard normal if absent."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if mu.shape != log_var.shape:
        raise ValueError(f"mu shape {mu.shape} != log_var shape {log_var.shape}")
    if eps is None:
        if rng is None:
            raise ValueError("pass either rng or eps")
        eps = rng.standard_normal(mu.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
        eps = np.broadcast_to(eps, mu.shape).copy()
    u = mu + np.exp(log_var / 2.0) * eps
    return GaussianEncoderOutput(mu=mu, log_var=log_var, eps=eps, u=u)


def gaussian_log_density(u: Tensor, mean, log_var) -> Tensor:
    """Per-sample diagonal-Gaussian log-density, summed over dimensions."""
    u = np.asarray(u, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    centered = u - mean
    quad = centered * centered * np.exp(-log_var)
    return -0.5 * np.sum(LOG_2PI + log_var + quad, axis=-1)


@dataclass(frozen=True)
class Prior:
    """Fixed diagonal-Gaussian prior; mean 0 / log_var 0 is the standard normal."""

    mean: float | Tensor = 0.0
    log_var: float | Tensor = 0.0

    @classmethod
    def standard(cls) -> "Prior":
        return cls()

    def log_density(self, u: Tensor) -> Tensor:
        return gaussian_log_density(u, self.mean, self.log_var)

    def grad_log_density(self, u: Tensor) -> Tensor:
        return -(u - self.mean) * np.exp(-np.asarray(self.log_var, dtype=np.float64))


def rate_term(enc: GaussianEncoderOutput, prior: Prior) -> Tensor:
    """Per-sample log-density ratio ln p(u|x) - ln prior(u) at the sampled u."""
    return gaussian_log_density(enc.u, enc.mu, enc.log_var) - prior.log_density(enc.u)


def rate_gradients(enc: GaussianEncoderOutput, prior: Prior) -> tuple[Tensor, Tensor, Tensor]:
    """Partial derivatives of the per-sample rate term.

    Returns (d/du, d/dmu, d/dlog_var) holding the other two arguments
    fixed; the chain through u(mu, log_var) is composed by the caller.
    """
    inv_var = np.exp(-enc.log_var)
    centered = enc.u - enc.mu
    d_u = -centered * inv_var - prior.grad_log_density(enc.u)
    d_mu = centered * inv_var
    d_lv = -0.5 + 0.5 * centered * centered * inv_var
    return d_u, d_mu, d_lv


@dataclass
class LossBreakdown:
    """Objective pieces in nats; total = joint_ll + s * sum(marginal - rate)."""

    joint_ll: float
    marginal_ll: list[float]
    rate: list[float]
    s: float
    total: float

    def minimized(self) -> tuple[float, float, float, float]:
        """(loss_total, loss_joint, loss_marginal, loss_rate) as minimized losses.

        loss_total == loss_joint + s * (loss_marginal + loss_rate) with
        loss_joint/-marginal the negated log-likelihood terms and loss_rate
        the summed rate penalty.
        """
        loss_joint = -self.joint_ll
        loss_marginal = -sum(self.marginal_ll)
        loss_rate = sum(self.rate)
        return -self.total, loss_joint, loss_marginal, loss_rate


def inl_loss(
    joint_pred: Tensor,
    marginal_preds: list[Tensor],
    rates: list[Tensor],
    y: Tensor,
    s: float,
) -> LossBreakdown:
    """Evaluate the batch objective from predictions and per-sample rates."""
    if len(marginal_preds) != len(rates):
        raise ValueError(
            f"{len(marginal_preds)} marginal predictions vs {len(rates)} rate vectors"
        )
    y = np.asarray(y)
    b = y.shape[0]
    rows = np.arange(b)
    joint_ll = float(np.log(np.maximum(joint_pred[rows, y], PROB_FLOOR)).mean())
    marginal_ll = [
        float(np.log(np.maximum(p[rows, y], PROB_FLOOR)).mean()) for p in marginal_preds
    ]
    rate = [float(np.mean(r)) for r in rates]
    total = joint_ll + s * sum(m - r for m, r in zip(marginal_ll, rate))
    return LossBreakdown(joint_ll=joint_ll, marginal_ll=marginal_ll, rate=rate, s=s, total=total)


def split_output_grad(
    fusion_input_error: Tensor,
    node_slices: list[int],
    rate_grads: list[Tensor] | None,
    s: float,
) -> list[Tensor]:
    """Split the fusion input-layer error into per-node output gradients.

    Slice j is the contiguous segment of ``fusion_input_error`` of width
    ``node_slices[j]``, corrected by subtracting ``s`` times node j's rate
    gradient w.r.t. its own activation. All inputs must share one sign
    convention; with s == 0 the result is exactly the contiguous slices.
    """
    widths = list(node_slices)
    if sum(widths) != fusion_input_error.shape[1]:
        raise ValueError(
            f"slice widths sum to {sum(widths)} but the error vector has "
            f"width {fusion_input_error.shape[1]}"
        )
    out = []
    offset = 0
    for j, w in enumerate(widths):
        piece = fusion_input_error[:, offset : offset + w]
        if s != 0.0 and rate_grads is not None:
            piece = piece - s * rate_grads[j]
        out.append(piece)
        offset += w
    return out
