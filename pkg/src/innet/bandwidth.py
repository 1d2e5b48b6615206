"""Closed-form per-epoch communication costs for the three schemes.

With q the total number of data points summed over the input nodes (each
node holds q/J of them), p the fusion input width, N the full model's
parameter count and s_bits the width of one transported value:

    in-network   2 * p * q * s_bits / J
    federated    2 * N * J * s_bits
    split        (2 * p * q + eta_frac * N * J) * s_bits

Gbit reporting is decimal (1 Gbit = 1e9 bits).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

GBIT = 1e9

VGG16_PARAMS = 138_344_128
RESNET50_PARAMS = 25_636_712
REFERENCE_J = 500
REFERENCE_P = 25088
REFERENCE_ETA = {"vgg16": 0.11, "resnet50": 0.88}
REFERENCE_N = {"vgg16": VGG16_PARAMS, "resnet50": RESNET50_PARAMS}
REFERENCE_QS = (50_000, 500_000)

# (model, q) -> (fl, sl, inl) in Gbits at the precision the reference states.
REFERENCE_CELLS = {
    ("vgg16", 50_000): (4427.0, 324.0, 0.16),
    ("resnet50", 50_000): (820.0, 441.0, 0.16),
    ("vgg16", 500_000): (4427.0, 1046.0, 1.6),
    ("resnet50", 500_000): (820.0, 1164.0, 1.6),
}


@dataclass(frozen=True)
class CostModel:
    p: int  # fusion input-layer width, elements
    q: int  # data points summed across nodes
    J: int  # input-node count
    N: int = 0  # parameters in one full model
    s_bits: int = 32
    eta_frac: float = 0.0  # client-side fraction of N for split learning

    def __post_init__(self):
        if self.p <= 0 or self.J <= 0 or self.s_bits <= 0:
            raise ValueError("p, J and s_bits must be positive")
        if self.q < 0 or self.N < 0:
            raise ValueError("q and N cannot be negative")
        if not 0.0 <= self.eta_frac <= 1.0:
            raise ValueError("eta_frac must lie in [0, 1]")


def inl_bits(m: CostModel) -> float:
    return 2.0 * m.p * m.q * m.s_bits / m.J


def fl_bits(m: CostModel) -> float:
    return 2.0 * m.N * m.J * m.s_bits


def sl_bits(m: CostModel) -> float:
    return (2.0 * m.p * m.q + m.eta_frac * m.N * m.J) * m.s_bits


def gbits(bits: float) -> float:
    return bits / GBIT


def round_sig(x: float, sig: int) -> float:
    if x == 0:
        return 0.0
    return round(x, sig - 1 - int(math.floor(math.log10(abs(x)))))


def table_rows(
    models: tuple[str, ...] = ("vgg16", "resnet50"),
    qs: tuple[int, ...] = REFERENCE_QS,
    j: int = REFERENCE_J,
    p: int = REFERENCE_P,
    s_bits: int = 32,
) -> list[dict]:
    """All cells of the reference bandwidth table for the given parameter grid."""
    rows = []
    for q in qs:
        for model in models:
            cm = CostModel(
                p=p, q=q, J=j, N=REFERENCE_N[model], s_bits=s_bits, eta_frac=REFERENCE_ETA[model]
            )
            rows.append(
                {
                    "model": model,
                    "q": q,
                    "fl_gbits": gbits(fl_bits(cm)),
                    "sl_gbits": gbits(sl_bits(cm)),
                    "inl_gbits": gbits(inl_bits(cm)),
                }
            )
    return rows


def check_table(rows: list[dict] | None = None) -> list[tuple[str, float, float, bool]]:
    """Compare computed cells against the frozen reference to 3 significant figures.

    Returns (cell name, computed Gbits, reference Gbits, ok) per cell; a cell
    passes when it rounds to the reference at 3 significant figures, or at
    the reference's own printed precision where that is coarser (0.16 and
    1.6 state only two digits).
    """
    rows = rows if rows is not None else table_rows()
    results = []
    for row in rows:
        key = (row["model"], row["q"])
        if key not in REFERENCE_CELLS:
            continue
        ref_fl, ref_sl, ref_inl = REFERENCE_CELLS[key]
        for scheme, computed, ref in (
            ("fl", row["fl_gbits"], ref_fl),
            ("sl", row["sl_gbits"], ref_sl),
            ("inl", row["inl_gbits"], ref_inl),
        ):
            sig = min(3, _printed_sig(ref))
            ok = round_sig(computed, sig) == round_sig(ref, sig)
            results.append((f"{scheme}:{row['model']}:q={row['q']}", computed, ref, ok))
    return results


def _printed_sig(ref: float) -> int:
    digits = f"{ref:g}".replace(".", "").replace("-", "").lstrip("0")
    return len(digits)


def format_table_text(rows: list[dict]) -> str:
    lines = [
        f"{'model':<10}{'data points':>12}{'FL [Gbit]':>14}{'SL [Gbit]':>14}{'INL [Gbit]':>14}"
    ]
    for row in rows:
        lines.append(
            f"{row['model']:<10}{row['q']:>12}"
            f"{row['fl_gbits']:>14.4g}{row['sl_gbits']:>14.4g}{row['inl_gbits']:>14.4g}"
        )
    return "\n".join(lines)


def write_table_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "q", "fl_gbits", "sl_gbits", "inl_gbits"])
        for row in rows:
            writer.writerow(
                [row["model"], row["q"], repr(row["fl_gbits"]), repr(row["sl_gbits"]), repr(row["inl_gbits"])]
            )


def for_inl_run(p: int, samples_per_node: int, j: int, s_bits: int = 32, n: int = 0) -> CostModel:
    """Cost model matching a run where every node processes samples_per_node
    points per epoch; q is the pooled count J * samples_per_node."""
    return CostModel(p=p, q=j * samples_per_node, J=j, N=n, s_bits=s_bits)


def scaled(m: CostModel, **changes) -> CostModel:
    return replace(m, **changes)
