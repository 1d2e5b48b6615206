"""Experiment driver: configure, run, and compare training runs.

A run produces a self-describing bundle directory:

    config.json   echoed config plus derived provenance (test-set hash, ...)
    metrics.csv   epoch,scheme,loss_total,loss_joint,loss_marginal,loss_rate,test_acc,cum_bits
    messages.csv  epoch,batch,direction,node,elements,bits (training messages)
    checkpoints/  one flat record per network
    figures/      accuracy curves (PNG)

loss_total is the minimized objective; loss_total == loss_joint +
s * (loss_marginal + loss_rate) where loss_joint/loss_marginal are negated
log-likelihood terms and loss_rate the summed rate penalty. cum_bits counts
training exchange only (evaluation traffic is never metered), drawn from
the message log rather than any closed-form formula. Re-running the echoed
config with the same seed reproduces metrics.csv byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, datagen, protocol, stack as stack_mod
from .nncore import Activation, save_network
from .plots import save_accuracy_curves
from .protocol import MessageLog
from .stack import build_stack, clone_stack, encoder_node, param_vector, set_param_vector

METRICS_HEADER = "epoch,scheme,loss_total,loss_joint,loss_marginal,loss_rate,test_acc,cum_bits"

OUTPUT_ENV_VAR = "INNET_OUT"

SCHEMES = ("inl", "fl", "sl")
LAYOUTS = ("exp1", "exp2")


@dataclass
class ExperimentConfig:
    scheme: str = "inl"
    layout: str = "exp1"
    n_nodes: int = 5
    q: int = 4000
    q_test: int = 1000
    d: int = 16
    k: int = 4
    sigmas: list[float] = field(default_factory=lambda: [0.4, 1.0, 2.0, 3.0, 4.0])
    separation: float = 6.0
    seed: int = 7
    d_u: int = 4
    enc_hidden: list[int] = field(default_factory=lambda: [64, 64])
    fusion_hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    epochs: int = 50
    batch_size: int = 100
    eta: float = 0.05
    s: float = 1.0
    sample_count: int = 1
    s_bits: int = 32
    local_epochs: int = 1
    preset: str = ""

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if len(self.sigmas) != self.n_nodes:
            raise ValueError(f"{self.n_nodes} nodes need {self.n_nodes} sigmas, got {len(self.sigmas)}")
        if self.q <= 0 or self.q_test <= 0:
            raise ValueError("q and q_test must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.sample_count < 1:
            raise ValueError("sample_count must be at least 1")
        if self.s_bits <= 0:
            raise ValueError("s_bits must be positive")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be at least 1")
        if Activation(self.activation) is Activation.SOFTMAX:
            raise ValueError("softmax is reserved for output layers")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


PRESETS: dict[str, dict] = {
    # Desk-scale multi-view run: five noisy views of one latent sample,
    # separation calibrated so the mean single-view Bayes accuracy is ~0.7.
    "exp1-desk": dict(
        layout="exp1", n_nodes=5, q=4000, q_test=1000, d=16, k=4,
        sigmas=[0.4, 1.0, 2.0, 3.0, 4.0], separation=6.0, seed=7, d_u=4,
        enc_hidden=[64, 64], fusion_hidden=[64, 64], activation="relu",
        epochs=50, batch_size=100, eta=0.05, s=0.05, s_bits=32,
    ),
    # Shared-data layout: every client sees every sample of its own view.
    "exp2-desk": dict(
        layout="exp2", n_nodes=5, q=3000, q_test=1000, d=16, k=4,
        sigmas=[0.4, 1.0, 2.0, 3.0, 4.0], separation=6.0, seed=11, d_u=4,
        enc_hidden=[64, 64], fusion_hidden=[64, 64], activation="relu",
        epochs=30, batch_size=100, eta=0.05, s=0.05, s_bits=32,
    ),
    # Fast smoke preset for tests.
    "exp1-tiny": dict(
        layout="exp1", n_nodes=2, q=240, q_test=80, d=6, k=3,
        sigmas=[0.5, 1.5], separation=5.0, seed=3, d_u=3,
        enc_hidden=[16], fusion_hidden=[16], activation="relu",
        epochs=3, batch_size=40, eta=0.1, s=0.1, s_bits=32,
    ),
}


def config_from_preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    merged = dict(PRESETS[name])
    merged.update(overrides)
    merged["preset"] = name
    cfg = ExperimentConfig.from_dict(merged)
    if "scheme" in merged:
        cfg.scheme = merged["scheme"]
    cfg.validate()
    return cfg


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[dict]
    out_dir: Path
    test_hash: str
    param_count: int
    relevance_nats: float = float("nan")

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1]["test_acc"]


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


def _hash_arrays(arrays) -> str:
    digest = hashlib.sha256()
    for a in arrays:
        digest.update(np.ascontiguousarray(a).tobytes())
    return digest.hexdigest()


def _build_dataset(cfg: ExperimentConfig):
    ss = np.random.SeedSequence(cfg.seed)
    data_rng, view_rng, model_rng, train_rng = [np.random.default_rng(s) for s in ss.spawn(4)]
    base, labels = datagen.synth_gaussian_classes(
        cfg.q + cfg.q_test, cfg.d, cfg.k, cfg.separation, data_rng
    )
    ds = datagen.make_views(base, labels, cfg.sigmas, view_rng)
    train = datagen.MultiViewDataset(
        base=ds.base[: cfg.q],
        labels=ds.labels[: cfg.q],
        views=[v[: cfg.q] for v in ds.views],
        sigmas=ds.sigmas,
        seed=cfg.seed,
    )
    test_views = [v[cfg.q :] for v in ds.views]
    test_labels = ds.labels[cfg.q :]
    test_hash = _hash_arrays(test_views + [test_labels])
    return train, test_views, test_labels, test_hash, model_rng, train_rng


def run(cfg: ExperimentConfig, out_dir) -> RunResult:
    """Execute one experiment and write its bundle under out_dir."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "figures").mkdir(exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)

    train, test_views, test_labels, test_hash, model_rng, train_rng = _build_dataset(cfg)

    log = MessageLog()
    if cfg.scheme == "inl":
        rows, networks, n_params, test_pred = _run_inl(
            cfg, train, test_views, test_labels, model_rng, train_rng, log
        )
    elif cfg.scheme == "fl":
        rows, networks, n_params, test_pred = _run_fl(
            cfg, train, test_views, test_labels, model_rng, train_rng, log
        )
    else:
        rows, networks, n_params, test_pred = _run_sl(
            cfg, train, test_views, test_labels, model_rng, train_rng, log
        )
    relevance_nats = _relevance_report(test_pred, test_labels)

    _write_metrics(out_dir / "metrics.csv", rows)
    log.to_csv(out_dir / "messages.csv")
    for name, net in networks:
        save_network(net, out_dir / "checkpoints" / f"{name}.innet")
    echo = {
        "config": cfg.to_dict(),
        "derived": {
            "test_set_hash": test_hash,
            "model_param_count": n_params,
            "metrics_schema": METRICS_HEADER,
            "cum_bits": "training messages only, from the message log",
            "relevance_nats": relevance_nats,
        },
    }
    with open(out_dir / "config.json", "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")

    series = {cfg.scheme: ([r["epoch"] for r in rows], [r["test_acc"] for r in rows])}
    bits_series = {cfg.scheme: ([r["cum_bits"] for r in rows], [r["test_acc"] for r in rows])}
    save_accuracy_curves(series, out_dir / "figures" / "accuracy_vs_epoch.png", "epoch", f"{cfg.scheme}: accuracy vs epochs")
    save_accuracy_curves(bits_series, out_dir / "figures" / "accuracy_vs_bits.png", "cumulative bits", f"{cfg.scheme}: accuracy vs exchanged bits")
    return RunResult(
        config=cfg, rows=rows, out_dir=out_dir, test_hash=test_hash,
        param_count=n_params, relevance_nats=relevance_nats,
    )


def _metrics_row(epoch, scheme, loss_total, loss_joint, loss_marginal, loss_rate, acc, cum_bits) -> dict:
    return {
        "epoch": epoch,
        "scheme": scheme,
        "loss_total": loss_total,
        "loss_joint": loss_joint,
        "loss_marginal": loss_marginal,
        "loss_rate": loss_rate,
        "test_acc": acc,
        "cum_bits": cum_bits,
    }


def _guard_finite(value: float, epoch: int, cfg: ExperimentConfig) -> None:
    if not np.isfinite(value):
        raise RuntimeError(
            f"loss became non-finite at epoch {epoch} "
            f"(scheme={cfg.scheme}, eta={cfg.eta}, s={cfg.s}); aborting"
        )


def _empirical_entropy(labels) -> float:
    counts = np.bincount(labels) / labels.shape[0]
    nz = counts[counts > 0]
    return float(-(nz * np.log(nz)).sum())


def _relevance_report(test_pred, test_labels) -> float:
    """Achieved relevance on the held-out set: H(Y) - mean log-loss, nats."""
    rows = np.arange(test_labels.shape[0])
    mean_ll = float(-np.log(np.maximum(test_pred[rows, test_labels], 1e-12)).mean())
    from .losses import relevance

    return relevance(_empirical_entropy(test_labels), mean_ll)


def _run_inl(cfg, train, test_views, test_labels, model_rng, train_rng, log):
    part = datagen.partition(train, "inl")
    stk = build_stack(
        cfg.n_nodes, cfg.d, cfg.enc_hidden, cfg.d_u, cfg.fusion_hidden, cfg.k,
        Activation(cfg.activation), model_rng,
    )
    for node, shard in zip(stk.nodes, part.shards):
        node.shard = shard.x_views[0]
    stk.fusion.labels = part.labels
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        em = protocol.train_epoch(
            stk.nodes, stk.fusion, cfg.batch_size, cfg.eta, cfg.s, train_rng,
            log=log, s_bits=cfg.s_bits, epoch=epoch, sample_count=cfg.sample_count,
        )
        loss_total, loss_joint, loss_marginal, loss_rate = em.loss.minimized()
        _guard_finite(loss_total, epoch, cfg)
        acc = protocol.protocol_accuracy(stk.nodes, stk.fusion, test_views, test_labels)
        rows.append(_metrics_row(epoch, "inl", loss_total, loss_joint, loss_marginal, loss_rate, acc, log.total_bits()))
    test_pred = protocol.infer(stk.nodes, stk.fusion, test_views)
    return rows, list(stack_mod.iter_networks(stk)), stk.param_count, test_pred


def _run_fl(cfg, train, test_views, test_labels, model_rng, train_rng, log):
    act = Activation(cfg.activation)
    if cfg.layout == "exp1":
        part = datagen.partition(train, "fl-exp1")
        base = build_stack(cfg.n_nodes, cfg.d, cfg.enc_hidden, cfg.d_u, cfg.fusion_hidden, cfg.k, act, model_rng)
        clients = [
            baselines.FLClient(c + 1, clone_stack(base), shard.x_views, shard.y)
            for c, shard in enumerate(part.shards)
        ]
        eval_views = test_views
    else:
        part = datagen.partition(train, "shared-exp2")
        base = build_stack(1, cfg.d, cfg.enc_hidden, cfg.d_u, cfg.fusion_hidden, cfg.k, act, model_rng)
        clients = [
            baselines.FLClient(c + 1, clone_stack(base), shard.x_views, shard.y)
            for c, shard in enumerate(part.shards)
        ]
        eval_views = [np.mean(test_views, axis=0)]
    server_params = param_vector(base)
    eval_stack = clone_stack(base)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        server_params, ce = baselines.fl_round(
            clients, server_params, cfg.local_epochs, cfg.eta, cfg.batch_size,
            train_rng, log=log, s_bits=cfg.s_bits, epoch=epoch,
        )
        _guard_finite(ce, epoch, cfg)
        set_param_vector(eval_stack, server_params)
        acc = stack_mod.accuracy(eval_stack, eval_views, test_labels)
        rows.append(_metrics_row(epoch, "fl", ce, ce, 0.0, 0.0, acc, log.total_bits()))
    set_param_vector(eval_stack, server_params)
    test_pred = stack_mod.predict_joint(eval_stack, eval_views)
    return rows, list(stack_mod.iter_networks(eval_stack)), base.param_count, test_pred


def _sl_clients(cfg, train, model_rng):
    act = Activation(cfg.activation)
    from . import nncore

    scheme = "sl-exp1" if cfg.layout == "exp1" else "shared-exp2"
    part = datagen.partition(train, scheme)
    n_branches = cfg.n_nodes if cfg.layout == "exp1" else 1
    proto = [
        encoder_node(v + 1, cfg.d, cfg.enc_hidden, cfg.d_u, act, model_rng)
        for v in range(n_branches)
    ]
    p = sum(b.latent_dim for b in proto)
    server = nncore.network(
        [p] + list(cfg.fusion_hidden) + [cfg.k],
        [act] * len(cfg.fusion_hidden) + [Activation.SOFTMAX],
        model_rng,
    )
    clients, y_by_client = [], []
    for c, shard in enumerate(part.shards):
        branches = [
            stack_mod.EncoderNode(
                b.node_id, nncore.clone_network(b.trunk), nncore.clone_network(b.mu_head),
                nncore.clone_network(b.logvar_head),
            )
            for b in proto
        ]
        clients.append(baselines.SLClient(c + 1, branches, shard.x_views))
        y_by_client.append(shard.y)  # labels live server-side in SL
    return clients, server, y_by_client


def _run_sl(cfg, train, test_views, test_labels, model_rng, train_rng, log):
    clients, server, y_by_client = _sl_clients(cfg, train, model_rng)
    eval_views = test_views if cfg.layout == "exp1" else [np.mean(test_views, axis=0)]
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        ce = baselines.sl_epoch(
            clients, server, y_by_client, cfg.batch_size, cfg.eta, train_rng,
            log=log, s_bits=cfg.s_bits, epoch=epoch,
        )
        _guard_finite(ce, epoch, cfg)
        pred = baselines.sl_predict(clients[0], server, eval_views).argmax(axis=1)
        acc = float(np.mean(pred == test_labels))
        rows.append(_metrics_row(epoch, "sl", ce, ce, 0.0, 0.0, acc, log.total_bits()))
    networks = [("server", server)]
    for b in clients[0].branches:
        networks.append((f"branch{b.node_id}_trunk", b.trunk))
        networks.append((f"branch{b.node_id}_mu", b.mu_head))
        networks.append((f"branch{b.node_id}_logvar", b.logvar_head))
    n_params = clients[0].param_count + server.param_count
    test_pred = baselines.sl_predict(clients[0], server, eval_views)
    return rows, networks, n_params, test_pred


def _write_metrics(path, rows) -> None:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            ",".join(
                [
                    str(r["epoch"]),
                    r["scheme"],
                    _fmt(r["loss_total"]),
                    _fmt(r["loss_joint"]),
                    _fmt(r["loss_marginal"]),
                    _fmt(r["loss_rate"]),
                    _fmt(r["test_acc"]),
                    str(int(r["cum_bits"])),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_bundle(bundle_dir) -> tuple[dict, list[dict]]:
    bundle_dir = Path(bundle_dir)
    with open(bundle_dir / "config.json") as fh:
        echo = json.load(fh)
    rows = []
    lines = (bundle_dir / "metrics.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        values = line.split(",")
        row = dict(zip(header, values))
        row["epoch"] = int(row["epoch"])
        for key in ("loss_total", "loss_joint", "loss_marginal", "loss_rate", "test_acc"):
            row[key] = float(row[key])
        row["cum_bits"] = int(row["cum_bits"])
        rows.append(row)
    return echo, rows


class ComparisonError(ValueError):
    pass


def _sparkline(values: list[float]) -> str:
    blocks = "▁▂▃▄▅▆▇█"
    lo, hi = min(values), max(values)
    span = hi - lo or 1.0
    return "".join(blocks[min(int((v - lo) / span * 8), 7)] for v in values)


def compare(bundle_dirs: list, out_dir) -> list[dict]:
    """Merge run bundles that share a test set into one report.

    A single bundle passes through unchanged (same rows, same curves);
    anything more is refused unless every bundle carries the same test-set
    hash.
    """
    if not bundle_dirs:
        raise ComparisonError("need at least one bundle to compare")
    bundles = [read_bundle(b) for b in bundle_dirs]
    hashes = {echo["derived"]["test_set_hash"] for echo, _ in bundles}
    if len(hashes) > 1:
        detail = "\n".join(
            f"  {Path(b)}: {echo['derived']['test_set_hash']}"
            for b, (echo, _) in zip(bundle_dirs, bundles)
        )
        raise ComparisonError(f"bundles were evaluated on different test sets:\n{detail}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged: list[dict] = []
    for echo, rows in bundles:
        merged.extend(rows)
    merged.sort(key=lambda r: (r["scheme"], r["epoch"]))
    _write_metrics(out_dir / "combined_metrics.csv", merged)

    series, bits_series, summary = {}, {}, []
    for echo, rows in bundles:
        scheme = rows[0]["scheme"]
        accs = [r["test_acc"] for r in rows]
        series[scheme] = ([r["epoch"] for r in rows], accs)
        bits_series[scheme] = ([r["cum_bits"] for r in rows], accs)
        summary.append(
            f"{scheme:>4}  final acc {accs[-1]:.3f}  total bits {rows[-1]['cum_bits']:>14,}  {_sparkline(accs)}"
        )
    save_accuracy_curves(series, out_dir / "accuracy_vs_epoch.png", "epoch", "accuracy vs epochs")
    save_accuracy_curves(bits_series, out_dir / "accuracy_vs_bits.png", "cumulative bits", "accuracy vs exchanged bits")
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    return merged


def default_out_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV_VAR, "runs"))
