"""Synthetic multi-view data: one latent labeled sample seen through J noisy views.

The base samples are Gaussian class blobs; they are standardized
per-feature first and each view then adds its own i.i.d. Gaussian noise,
so view j is exactly ``normalized base + sigma_j * noise``. Partition
schemes reshape the same dataset for the different training layouts.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .nncore import Tensor

log = logging.getLogger(__name__)

DATASET_MAGIC = b"INDATA1"

SCHEMES = ("inl", "fl-exp1", "sl-exp1", "shared-exp2")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class MultiViewDataset:
    base: Tensor  # [q, d], standardized
    labels: Tensor  # [q] ints in [0, K)
    views: list[Tensor]  # J arrays [q, d]
    sigmas: list[float]
    seed: int
    class_means: Tensor = field(init=False)  # [K, d], in normalized space
    within_std: Tensor = field(init=False)  # [d], pooled within-class std

    def __post_init__(self):
        for j, v in enumerate(self.views):
            if v.shape != self.base.shape:
                raise ValueError(f"view {j} shape {v.shape} != base shape {self.base.shape}")
        if self.labels.shape[0] != self.base.shape[0]:
            raise ValueError("labels not aligned with base samples")
        k = int(self.labels.max()) + 1
        means = np.stack([self.base[self.labels == c].mean(axis=0) for c in range(k)])
        centered = self.base - means[self.labels]
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "within_std", centered.std(axis=0))

    @property
    def q(self) -> int:
        return self.base.shape[0]

    @property
    def d(self) -> int:
        return self.base.shape[1]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]


def synth_gaussian_classes(
    q: int, d: int, k: int, separation: float, seed
) -> tuple[Tensor, Tensor]:
    """K unit-variance Gaussian blobs with equal pairwise centroid distance.

    Centroids sit at ``separation / sqrt(2)`` times K orthonormal directions,
    so every pair of centroids is exactly ``separation`` apart. Labels are
    balanced within one sample.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    if k > d:
        raise ValueError(f"{k} orthonormal class directions do not fit in {d} dimensions")
    rng = _rng(seed)
    directions, _ = np.linalg.qr(rng.standard_normal((d, k)))
    centers = separation / np.sqrt(2.0) * directions.T  # [k, d]
    labels = rng.permutation(np.resize(np.arange(k), q)).astype(np.int64)
    base = centers[labels] + rng.standard_normal((q, d))
    return base, labels


def make_views(base: Tensor, labels: Tensor, sigmas: list[float], seed) -> MultiViewDataset:
    """Standardize the base per-feature, then add per-view Gaussian noise."""
    if any(s < 0 for s in sigmas):
        raise ValueError("noise standard deviations cannot be negative")
    rng = _rng(seed)
    base = np.asarray(base, dtype=np.float64)
    mean = base.mean(axis=0)
    std = base.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    normalized = (base - mean) / std
    views = [normalized + sigma * rng.standard_normal(normalized.shape) for sigma in sigmas]
    seed_int = seed if isinstance(seed, (int, np.integer)) else -1
    return MultiViewDataset(
        base=normalized,
        labels=np.asarray(labels, dtype=np.int64),
        views=views,
        sigmas=[float(s) for s in sigmas],
        seed=int(seed_int),
    )


@dataclass
class Shard:
    indices: Tensor
    x_views: list[Tensor]
    y: Tensor


@dataclass
class Partition:
    scheme: str
    shards: list[Shard]
    labels: Tensor  # full label vector, for the fusion node / server


def partition(dataset: MultiViewDataset, scheme: str) -> Partition:
    """Reshape the dataset into per-node shards for one training layout.

    inl:         node j holds view j of every sample; labels go to fusion.
    fl-exp1:     client j holds all J views of its disjoint sample block.
    sl-exp1:     same blocks as fl-exp1; labels are read server-side only.
    shared-exp2: client j holds every sample of its own view.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    j = dataset.n_views
    q = dataset.q
    everything = np.arange(q)
    if scheme == "inl":
        shards = [Shard(everything, [dataset.views[v]], dataset.labels) for v in range(j)]
    elif scheme in ("fl-exp1", "sl-exp1"):
        m = q // j
        if m == 0:
            raise ValueError(f"{q} samples cannot be split across {j} clients")
        if q % j:
            log.warning("dropping %d of %d samples so %d clients get equal shards", q % j, q, j)
        shards = []
        for c in range(j):
            idx = everything[c * m : (c + 1) * m]
            shards.append(Shard(idx, [dataset.views[v][idx] for v in range(j)], dataset.labels[idx]))
    else:  # shared-exp2
        shards = [Shard(everything, [dataset.views[v]], dataset.labels) for v in range(j)]
    return Partition(scheme=scheme, shards=shards, labels=dataset.labels)


def bayes_accuracy_single_view(
    dataset: MultiViewDataset, view: int, n_mc: int = 20_000, rng=0
) -> float:
    """Monte-Carlo Bayes accuracy of the optimal classifier on one view.

    The view's class-conditional law is Gaussian with the dataset's class
    means and diagonal variance within_std^2 + sigma_view^2, equal across
    classes, so the Bayes rule is nearest-mean in the whitened metric.
    """
    rng = _rng(rng)
    k = dataset.n_classes
    var = dataset.within_std**2 + dataset.sigmas[view] ** 2
    y = rng.integers(0, k, size=n_mc)
    x = dataset.class_means[y] + np.sqrt(var) * rng.standard_normal((n_mc, dataset.d))
    dist = ((x[:, None, :] - dataset.class_means[None, :, :]) ** 2 / var).sum(axis=2)
    return float(np.mean(dist.argmin(axis=1) == y))


def mean_single_view_bayes(dataset: MultiViewDataset, n_mc: int = 20_000, rng=0) -> float:
    rng = _rng(rng)
    accs = [bayes_accuracy_single_view(dataset, v, n_mc, rng) for v in range(dataset.n_views)]
    return float(np.mean(accs))


def save_dataset(dataset: MultiViewDataset, path) -> None:
    """Binary export: (q, d, K, J, sigmas, seed) header + row-major float64."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(
            struct.pack(
                "<iiii", dataset.q, dataset.d, dataset.n_classes, dataset.n_views
            )
        )
        fh.write(np.asarray(dataset.sigmas, dtype="<f8").tobytes())
        fh.write(struct.pack("<q", dataset.seed))
        fh.write(np.ascontiguousarray(dataset.base, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<f8").tobytes())
        for view in dataset.views:
            fh.write(np.ascontiguousarray(view, dtype="<f8").tobytes())


def load_dataset(path) -> MultiViewDataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: not a {DATASET_MAGIC.decode()} dataset file")
        q, d, _k, j = struct.unpack("<iiii", fh.read(16))
        sigmas = np.frombuffer(fh.read(8 * j), dtype="<f8").tolist()
        (seed,) = struct.unpack("<q", fh.read(8))
        base = np.frombuffer(fh.read(8 * q * d), dtype="<f8").reshape(q, d).copy()
        labels = np.frombuffer(fh.read(8 * q), dtype="<f8").astype(np.int64)
        views = [
            np.frombuffer(fh.read(8 * q * d), dtype="<f8").reshape(q, d).copy()
            for _ in range(j)
        ]
    return MultiViewDataset(base=base, labels=labels, views=views, sigmas=sigmas, seed=seed)
