"""innet command line: run experiments, compare bundles, print reference tables.

Subcommands:
    run      train one scheme and write a result bundle
    compare  merge finished bundles into combined curves
    table1   print the reference bandwidth table (``--check`` verifies it)
    oracle   print exact-objective values for tiny discrete laws
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bandwidth, infometrics
from .experiment import (
    ComparisonError,
    ExperimentConfig,
    PRESETS,
    compare,
    config_from_preset,
    default_out_root,
    run,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="innet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_parser(sub)
    _add_compare_parser(sub)
    _add_table_parser(sub)
    _add_oracle_parser(sub)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ValueError) else 3


def _add_run_parser(sub) -> None:
    p = sub.add_parser("run", help="run one experiment and write a bundle")
    p.add_argument("--scheme", choices=("inl", "fl", "sl"), default=None,
                   help="default inl, or the echoed config's scheme with --config")
    p.add_argument("--preset", choices=sorted(PRESETS), default="exp1-desk")
    p.add_argument("--config", type=Path, help="run from an echoed config.json instead of a preset")
    p.add_argument("--out", type=Path, help="bundle directory (default <INNET_OUT or runs>/<scheme>)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--eta", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--q-test", type=int, dest="q_test")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--j", type=int, dest="n_nodes")
    p.add_argument("--d-u", type=int, dest="d_u")
    p.add_argument("--sigmas", type=float, nargs="+")
    p.add_argument("--separation", type=float)
    p.add_argument("--enc-hidden", type=int, nargs="+", dest="enc_hidden")
    p.add_argument("--fusion-hidden", type=int, nargs="+", dest="fusion_hidden")
    p.add_argument("--activation", choices=("identity", "relu", "sigmoid", "tanh"))
    p.add_argument("--sample-count", type=int, dest="sample_count")
    p.add_argument("--s-bits", type=int, dest="s_bits")
    p.add_argument("--local-epochs", type=int, dest="local_epochs")
    p.set_defaults(func=_cmd_run)


def _cmd_run(args) -> int:
    override_keys = (
        "epochs", "batch_size", "eta", "s", "seed", "q", "q_test", "d", "k",
        "n_nodes", "d_u", "sigmas", "separation", "enc_hidden", "fusion_hidden",
        "activation", "sample_count", "s_bits", "local_epochs",
    )
    overrides = {k: getattr(args, k) for k in override_keys if getattr(args, k, None) is not None}
    if args.config:
        with open(args.config) as fh:
            echo = json.load(fh)
        data = echo.get("config", echo)
        data.update(overrides)
        if args.scheme is not None:
            data["scheme"] = args.scheme
        cfg = ExperimentConfig.from_dict(data)
        cfg.validate()
    else:
        cfg = config_from_preset(args.preset, **overrides)
        cfg.scheme = args.scheme or "inl"
        cfg.validate()
    out = args.out or (default_out_root() / f"{cfg.scheme}-{cfg.preset or 'custom'}")
    result = run(cfg, out)
    last = result.rows[-1]
    print(f"bundle: {result.out_dir}")
    print(
        f"{cfg.scheme}: {cfg.epochs} epochs, final test accuracy {last['test_acc']:.3f}, "
        f"relevance {result.relevance_nats:.3f} nats, "
        f"{last['cum_bits']:,} bits exchanged"
    )
    return 0


def _add_compare_parser(sub) -> None:
    p = sub.add_parser("compare", help="merge finished bundles into combined curves")
    p.add_argument("bundles", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=_cmd_compare)


def _cmd_compare(args) -> int:
    out = args.out or (default_out_root() / "comparison")
    try:
        compare(args.bundles, out)
    except ComparisonError as exc:
        print(f"refusing to compare: {exc}", file=sys.stderr)
        return 1
    print((Path(out) / "summary.txt").read_text(), end="")
    print(f"written: {out}")
    return 0


def _add_table_parser(sub) -> None:
    p = sub.add_parser("table1", help="print the reference bandwidth comparison table")
    p.add_argument("--check", action="store_true", help="verify against the frozen reference values")
    p.add_argument("--csv", type=Path, help="also write the table as CSV")
    p.add_argument("--q", type=int, choices=bandwidth.REFERENCE_QS)
    p.add_argument("--model", choices=("vgg16", "resnet50"))
    p.add_argument("--s-bits", type=int, dest="s_bits", default=32)
    p.add_argument("--j", type=int, default=bandwidth.REFERENCE_J)
    p.add_argument("--p", type=int, default=bandwidth.REFERENCE_P)
    p.set_defaults(func=_cmd_table)


def _cmd_table(args) -> int:
    models = (args.model,) if args.model else ("vgg16", "resnet50")
    qs = (args.q,) if args.q else bandwidth.REFERENCE_QS
    rows = bandwidth.table_rows(models=models, qs=qs, j=args.j, p=args.p, s_bits=args.s_bits)
    print(bandwidth.format_table_text(rows))
    if args.csv:
        bandwidth.write_table_csv(rows, args.csv)
    if args.check:
        if args.s_bits != 32 or args.j != bandwidth.REFERENCE_J or args.p != bandwidth.REFERENCE_P:
            print("check requires the reference parameters (s_bits=32, J=500, p=25088)", file=sys.stderr)
            return 1
        results = bandwidth.check_table(rows)
        failed = [r for r in results if not r[3]]
        for name, computed, ref, ok in results:
            mark = "ok " if ok else "FAIL"
            print(f"{mark} {name:<24} computed {computed:.6g} Gbit, reference {ref:g} Gbit")
        return 1 if failed else 0
    return 0


def _add_oracle_parser(sub) -> None:
    p = sub.add_parser("oracle", help="exact objective values on tiny discrete laws")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--views", type=int, default=2)
    p.set_defaults(func=_cmd_oracle)


def _cmd_oracle(args) -> int:
    s = args.s
    copies = infometrics.copies_pmf(args.views)
    value = infometrics.optimal_lagrangian(copies, s)
    print(f"{'law':<22}{'optimal':>12}{'variational':>14}")
    print(
        f"{'binary copies':<22}{value:>12.6f}"
        f"{infometrics.population_variational_value(copies, s):>14.6f}"
    )
    rng = np.random.default_rng(args.seed)
    for i in range(args.instances):
        pmf = infometrics.random_pmf(rng, 2, [2] * args.views, [2] * args.views)
        opt = infometrics.optimal_lagrangian(pmf, s)
        var = infometrics.population_variational_value(pmf, s)
        print(f"{f'random #{i} (seed {args.seed})':<22}{opt:>12.6f}{var:>14.6f}")
    best, _ = infometrics.search_optimal_maps(
        copies.p_y, copies.x_channels, [2] * args.views, s
    )
    print(f"grid-search ceiling on the copies law: {best:.6f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
