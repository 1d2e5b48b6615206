"""Exact discrete-distribution evaluation of the theoretical objective.

Everything here works on tiny finite alphabets where the full joint tensor
fits in memory, so every entropy and mutual information is computed by
exact marginalization rather than sampling. The optimal objective

    L_opt(s) = -H(Y | U_1..U_J) - s * sum_j [ H(Y | U_j) + I(U_j; X_j) ]

is evaluated over joint laws of the factorized form
P(y) * prod_j P(x_j | y) * prod_j P(u_j | x_j); the code-channel grid
search below serves as a ground-truth ceiling for what any trained stack
can achieve. All values are in nats.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .losses import rate_term
from .nncore import Tensor
from .stack import INLStack, fusion_forward, node_encode

MAX_JOINT_CELLS = 10_000_000
MAX_GRID_EVALS = 1_000_000


def entropy(pmf: Tensor) -> float:
    """Shannon entropy -sum p ln p in nats, with 0 ln 0 = 0."""
    p = np.asarray(pmf, dtype=np.float64).ravel()
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return _h(p)


def _h(p: Tensor) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass(frozen=True)
class JointPMF:
    """Factorized joint law over (Y, X_1..X_J, U_1..U_J).

    ``x_channels[j]`` is the row-stochastic matrix P(x_j | y) with shape
    [|Y|, |X_j|]; ``u_channels[j]`` is P(u_j | x_j) with shape
    [|X_j|, |U_j|]. U_j depends on X_j alone by construction, so the
    Markov structure the optimal objective assumes holds on every instance.
    """

    p_y: Tensor
    x_channels: tuple[Tensor, ...]
    u_channels: tuple[Tensor, ...]

    def __post_init__(self):
        object.__setattr__(self, "p_y", np.asarray(self.p_y, dtype=np.float64))
        object.__setattr__(
            self, "x_channels", tuple(np.asarray(c, dtype=np.float64) for c in self.x_channels)
        )
        object.__setattr__(
            self, "u_channels", tuple(np.asarray(c, dtype=np.float64) for c in self.u_channels)
        )
        if len(self.x_channels) != len(self.u_channels):
            raise ValueError("need one code channel per view channel")
        _check_pmf_vector(self.p_y)
        for j, (cx, cu) in enumerate(zip(self.x_channels, self.u_channels)):
            if cx.shape[0] != self.p_y.shape[0]:
                raise ValueError(f"x_channels[{j}] rows must match |Y|")
            if cu.shape[0] != cx.shape[1]:
                raise ValueError(f"u_channels[{j}] rows must match |X_{j}|")
            _check_rows(cx, f"x_channels[{j}]")
            _check_rows(cu, f"u_channels[{j}]")
        cells = self.p_y.shape[0]
        for cx in self.x_channels:
            cells *= cx.shape[1]
        for cu in self.u_channels:
            cells *= cu.shape[1]
        if cells > MAX_JOINT_CELLS:
            raise ValueError(f"joint tensor would hold {cells} cells (limit {MAX_JOINT_CELLS})")

    @property
    def n_views(self) -> int:
        return len(self.x_channels)

    def joint(self) -> Tensor:
        """Full joint tensor with axes (y, x_1..x_J, u_1..u_J)."""
        j = self.n_views
        letters = "abcdefghijklmnopqrstuvwxyz"
        y = letters[0]
        xs = letters[1 : 1 + j]
        us = letters[1 + j : 1 + 2 * j]
        operands = [y] + [y + xs[i] for i in range(j)] + [xs[i] + us[i] for i in range(j)]
        expr = ",".join(operands) + "->" + y + "".join(xs) + "".join(us)
        return np.einsum(expr, self.p_y, *self.x_channels, *self.u_channels)


def _check_pmf_vector(p: Tensor) -> None:
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("not a probability vector (within 1e-12)")


def _check_rows(mat: Tensor, name: str) -> None:
    if np.any(mat < 0) or np.any(np.abs(mat.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError(f"{name} is not row-stochastic (within 1e-12)")


def random_pmf(
    rng: np.random.Generator,
    n_y: int,
    x_sizes: list[int],
    u_sizes: list[int],
    concentration: float = 1.0,
) -> JointPMF:
    p_y = rng.dirichlet(np.full(n_y, concentration))
    x_channels = [rng.dirichlet(np.full(kx, concentration), size=n_y) for kx in x_sizes]
    u_channels = [
        rng.dirichlet(np.full(ku, concentration), size=kx)
        for kx, ku in zip(x_sizes, u_sizes)
    ]
    return JointPMF(p_y, tuple(x_channels), tuple(u_channels))


def copies_pmf(n_views: int) -> JointPMF:
    """Uniform binary Y copied losslessly into every X_j and U_j."""
    eye = np.eye(2)
    return JointPMF(np.array([0.5, 0.5]), (eye,) * n_views, (eye,) * n_views)


def _marginal(joint: Tensor, keep: tuple[int, ...]) -> Tensor:
    drop = tuple(ax for ax in range(joint.ndim) if ax not in keep)
    return joint.sum(axis=drop)


def optimal_lagrangian(pmf: JointPMF, s: float) -> float:
    """Exact value of the optimal objective for this joint law."""
    t = pmf.joint()
    j = pmf.n_views
    u_axes = tuple(range(1 + j, 1 + 2 * j))
    p_yu = _marginal(t, (0,) + u_axes)
    h_y_given_all = _h(p_yu) - _h(p_yu.sum(axis=0))
    penalty = 0.0
    for i in range(j):
        p_y_ui = _marginal(t, (0, 1 + j + i))
        h_y_ui = _h(p_y_ui) - _h(p_y_ui.sum(axis=0))
        p_xi_ui = _marginal(t, (1 + i, 1 + j + i))
        mi = _h(p_xi_ui.sum(axis=0)) + _h(p_xi_ui.sum(axis=1)) - _h(p_xi_ui)
        penalty += h_y_ui + mi
    return -h_y_given_all - s * penalty


def population_variational_value(pmf: JointPMF, s: float) -> float:
    """Population value of the variational objective with the true
    conditionals plugged in as decoders and the true marginals as priors.

    Computed from log-ratios by exact enumeration, independently of the
    entropy decomposition in optimal_lagrangian; the two agree when the
    variational distributions are the induced ones.
    """
    t = pmf.joint()
    j = pmf.n_views
    u_axes = tuple(range(1 + j, 1 + 2 * j))
    p_yu = _marginal(t, (0,) + u_axes)
    p_u = p_yu.sum(axis=0, keepdims=True)
    value = _weighted_log_ratio(p_yu, np.broadcast_to(p_u, p_yu.shape))
    for i in range(j):
        p_y_ui = _marginal(t, (0, 1 + j + i))
        p_ui = p_y_ui.sum(axis=0, keepdims=True)
        value += s * _weighted_log_ratio(p_y_ui, np.broadcast_to(p_ui, p_y_ui.shape))
        p_xi_ui = _marginal(t, (1 + i, 1 + j + i))
        # E[ln P(u|x) - ln P(u)] with the encoder channel known exactly.
        enc = pmf.u_channels[i]
        prior = p_xi_ui.sum(axis=0, keepdims=True)
        ratio = np.zeros_like(p_xi_ui)
        mask = p_xi_ui > 0
        ratio[mask] = np.log(enc[mask]) - np.log(np.broadcast_to(prior, p_xi_ui.shape)[mask])
        value -= s * float((p_xi_ui * ratio).sum())
    return value


def _weighted_log_ratio(p_joint: Tensor, p_cond_denominator: Tensor) -> float:
    """sum p(a,b) ln( p(a,b) / p(b) ) == E[ln p(a|b)] with zero-cell guard."""
    mask = p_joint > 0
    out = np.zeros_like(p_joint)
    out[mask] = np.log(p_joint[mask]) - np.log(p_cond_denominator[mask])
    return float((p_joint * out).sum())


def _simplex_grid(k: int, step: float) -> list[np.ndarray]:
    m = round(1.0 / step)
    if abs(m * step - 1.0) > 1e-12:
        raise ValueError("step must divide 1")
    grid = []
    for cuts in itertools.combinations_with_replacement(range(m + 1), k - 1):
        counts = np.diff((0,) + cuts + (m,))
        grid.append(counts * step)
    return grid


def search_optimal_maps(
    p_y: Tensor,
    x_channels: tuple[Tensor, ...],
    u_sizes: list[int],
    s: float,
    step: float = 0.25,
) -> tuple[float, tuple[Tensor, ...]]:
    """Exhaustive grid search over the code channels P(u_j | x_j).

    Every row of every channel ranges over the probability simplex
    discretized at ``step``; returns the best objective value and the
    channels achieving it. Only feasible on tiny alphabets.
    """
    per_channel: list[list[Tensor]] = []
    total = 1
    for cx, ku in zip(x_channels, u_sizes):
        rows = _simplex_grid(ku, step)
        candidates = [np.stack(combo) for combo in itertools.product(rows, repeat=cx.shape[1])]
        per_channel.append(candidates)
        total *= len(candidates)
    if total > MAX_GRID_EVALS:
        raise ValueError(f"{total} grid points exceed the {MAX_GRID_EVALS} cap")
    best_value = -np.inf
    best = None
    for combo in itertools.product(*per_channel):
        value = optimal_lagrangian(JointPMF(p_y, tuple(x_channels), tuple(combo)), s)
        if value > best_value:
            best_value = value
            best = combo
    return best_value, best


def enumerate_law(pmf: JointPMF) -> tuple[list[Tensor], Tensor, Tensor]:
    """All (y, x_1..x_J) cells as one-hot views, with their probabilities."""
    sizes = [c.shape[1] for c in pmf.x_channels]
    ys, weights, cells = [], [], []
    for y in range(pmf.p_y.shape[0]):
        for xs in itertools.product(*(range(k) for k in sizes)):
            w = pmf.p_y[y]
            for j, x in enumerate(xs):
                w *= pmf.x_channels[j][y, x]
            ys.append(y)
            weights.append(w)
            cells.append(xs)
    x_views = []
    for j, k in enumerate(sizes):
        onehot = np.zeros((len(cells), k))
        for i, xs in enumerate(cells):
            onehot[i, xs[j]] = 1.0
        x_views.append(onehot)
    return x_views, np.asarray(ys, dtype=np.int64), np.asarray(weights)


def sample_law(pmf: JointPMF, n: int, rng: np.random.Generator) -> tuple[list[Tensor], Tensor]:
    """Draw (one-hot views, labels) from P(y) * prod_j P(x_j | y)."""
    y = rng.choice(pmf.p_y.shape[0], size=n, p=pmf.p_y)
    x_views = []
    for cx in pmf.x_channels:
        k = cx.shape[1]
        x = np.array([rng.choice(k, p=cx[label]) for label in y])
        onehot = np.zeros((n, k))
        onehot[np.arange(n), x] = 1.0
        x_views.append(onehot)
    return x_views, y.astype(np.int64)


def stack_population_value(
    stack: INLStack, pmf: JointPMF, s: float, rng: np.random.Generator, mc_samples: int = 128
) -> float:
    """Population objective of a trained stack under the law, Monte Carlo
    over the reparametrization noise, exact over the data cells."""
    x_views, y, weights = enumerate_law(pmf)
    n = y.shape[0]
    acc = 0.0
    for _ in range(mc_samples):
        nfs = [
            node_encode(node, x, rng.standard_normal((n, node.latent_dim)))
            for node, x in zip(stack.nodes, x_views)
        ]
        u_concat = np.concatenate([nf.enc.u for nf in nfs], axis=1)
        ff = fusion_forward(stack.fusion, u_concat)
        rows = np.arange(n)
        per_cell = np.log(np.maximum(ff.joint[rows, y], 1e-12))
        for node, nf, marg in zip(stack.nodes, nfs, ff.marginals):
            per_cell = per_cell + s * (
                np.log(np.maximum(marg[rows, y], 1e-12)) - rate_term(nf.enc, node.prior)
            )
        acc += float((weights * per_cell).sum())
    return acc / mc_samples


def empirical_bound_gap(
    stack: INLStack,
    pmf: JointPMF,
    s: float,
    rng: np.random.Generator,
    mc_samples: int = 128,
    step: float = 0.25,
) -> float:
    """Grid-search optimum minus the trained stack's objective value.

    Non-negative up to the grid discretization and Monte Carlo error: no
    stack should beat the exhaustive-search ceiling on the same law.
    """
    u_sizes = [c.shape[1] for c in pmf.u_channels]
    best, _ = search_optimal_maps(pmf.p_y, pmf.x_channels, u_sizes, s, step)
    achieved = stack_population_value(stack, pmf, s, rng, mc_samples)
    return best - achieved
