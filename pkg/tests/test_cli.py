"""Command-line surface: run bundles, comparisons, reference table, oracle."""

import json

import numpy as np
import pytest

from innet.cli import main
from innet.experiment import (
    ComparisonError,
    METRICS_HEADER,
    compare,
    config_from_preset,
    run,
)


@pytest.fixture(scope="module")
def tiny_bundles(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundles")
    results = {}
    for scheme in ("inl", "fl", "sl"):
        cfg = config_from_preset("exp1-tiny", scheme=scheme)
        results[scheme] = run(cfg, root / scheme)
    return root, results


class TestRunBundles:
    def test_metrics_csv_schema_and_rows(self, tiny_bundles):
        root, results = tiny_bundles
        lines = (root / "inl" / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) == 1 + results["inl"].config.epochs

    def test_bundle_is_self_describing(self, tiny_bundles):
        root, results = tiny_bundles
        echo = json.loads((root / "inl" / "config.json").read_text())
        assert echo["config"]["scheme"] == "inl"
        assert echo["derived"]["test_set_hash"] == results["inl"].test_hash
        assert (root / "inl" / "messages.csv").exists()
        assert (root / "inl" / "figures" / "accuracy_vs_epoch.png").stat().st_size > 0
        assert (root / "inl" / "figures" / "accuracy_vs_bits.png").stat().st_size > 0
        assert any((root / "inl" / "checkpoints").iterdir())

    def test_relevance_reported_and_bounded_by_label_entropy(self, tiny_bundles):
        root, results = tiny_bundles
        for scheme, res in results.items():
            echo = json.loads((root / scheme / "config.json").read_text())
            rel = echo["derived"]["relevance_nats"]
            assert np.isfinite(rel)
            assert rel <= np.log(res.config.k) + 1e-9
            assert rel == res.relevance_nats

    def test_default_output_root_honors_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("INNET_OUT", str(tmp_path / "env-root"))
        code = main(["run", "--preset", "exp1-tiny", "--scheme", "inl", "--epochs", "1"])
        assert code == 0
        assert (tmp_path / "env-root" / "inl-exp1-tiny" / "metrics.csv").exists()

    def test_same_config_reproduces_metrics_byte_identically(self, tiny_bundles, tmp_path):
        root, results = tiny_bundles
        cfg = config_from_preset("exp1-tiny", scheme="inl")
        run(cfg, tmp_path / "again")
        assert (tmp_path / "again" / "metrics.csv").read_bytes() == (
            root / "inl" / "metrics.csv"
        ).read_bytes()

    def test_rerun_from_echoed_config(self, tiny_bundles, tmp_path):
        root, _ = tiny_bundles
        code = main(
            [
                "run",
                "--config", str(root / "inl" / "config.json"),
                "--out", str(tmp_path / "echoed"),
            ]
        )
        assert code == 0
        assert (tmp_path / "echoed" / "metrics.csv").read_bytes() == (
            root / "inl" / "metrics.csv"
        ).read_bytes()

    def test_fl_bits_constant_per_round(self, tiny_bundles):
        _, results = tiny_bundles
        rows = results["fl"].rows
        cfg = results["fl"].config
        increments = np.diff([0] + [r["cum_bits"] for r in rows])
        expected = 2 * results["fl"].param_count * cfg.n_nodes * cfg.s_bits
        assert np.all(increments == expected)

    def test_cumulative_bits_monotone(self, tiny_bundles):
        _, results = tiny_bundles
        for res in results.values():
            bits = [r["cum_bits"] for r in res.rows]
            assert all(b1 <= b2 for b1, b2 in zip(bits, bits[1:]))

    def test_exp2_layout_smoke(self, tmp_path):
        for scheme in ("inl", "fl", "sl"):
            cfg = config_from_preset(
                "exp2-desk", scheme=scheme, epochs=2, q=300, q_test=100,
                enc_hidden=[8], fusion_hidden=[8],
            )
            res = run(cfg, tmp_path / f"exp2-{scheme}")
            assert len(res.rows) == 2
            assert np.isfinite(res.rows[-1]["test_acc"])

    def test_invalid_config_exits_2(self, tmp_path):
        code = main(["run", "--preset", "exp1-tiny", "--eta", "-1", "--out", str(tmp_path / "x")])
        assert code == 2

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_nan_loss_aborts_with_diagnostic(self, tmp_path, capsys):
        code = main(
            [
                "run", "--preset", "exp1-tiny", "--eta", "1e9", "--epochs", "2",
                "--out", str(tmp_path / "nan"),
            ]
        )
        assert code == 3
        assert "non-finite" in capsys.readouterr().err


class TestCompare:
    def test_merges_and_reports(self, tiny_bundles, tmp_path):
        root, _ = tiny_bundles
        out = tmp_path / "cmp"
        merged = compare([root / "inl", root / "fl", root / "sl"], out)
        assert {r["scheme"] for r in merged} == {"inl", "fl", "sl"}
        combined = (out / "combined_metrics.csv").read_text().strip().splitlines()
        assert combined[0] == METRICS_HEADER
        assert (out / "accuracy_vs_bits.png").stat().st_size > 0
        summary = (out / "summary.txt").read_text()
        assert "inl" in summary and "fl" in summary and "sl" in summary

    def test_single_bundle_is_identity_passthrough(self, tiny_bundles, tmp_path):
        root, _ = tiny_bundles
        compare([root / "inl"], tmp_path / "solo")
        combined = (tmp_path / "solo" / "combined_metrics.csv").read_bytes()
        assert combined == (root / "inl" / "metrics.csv").read_bytes()

    def test_empty_bundle_list_rejected(self, tmp_path):
        with pytest.raises(ComparisonError):
            compare([], tmp_path / "none")

    def test_mismatched_test_sets_refused_with_hashes(self, tiny_bundles, tmp_path):
        root, _ = tiny_bundles
        other_cfg = config_from_preset("exp1-tiny", scheme="inl", seed=99)
        run(other_cfg, tmp_path / "other")
        with pytest.raises(ComparisonError, match="different test sets"):
            compare([root / "inl", tmp_path / "other"], tmp_path / "bad")
        code = main(
            ["compare", str(root / "inl"), str(tmp_path / "other"), "--out", str(tmp_path / "bad2")]
        )
        assert code == 1

    def test_different_q_is_refused(self, tiny_bundles, tmp_path):
        root, _ = tiny_bundles
        other_cfg = config_from_preset("exp1-tiny", scheme="inl", q=120)
        run(other_cfg, tmp_path / "smallq")
        with pytest.raises(ComparisonError):
            compare([root / "inl", tmp_path / "smallq"], tmp_path / "bad3")


class TestTableCommand:
    def test_check_passes(self, capsys):
        assert main(["table1", "--check"]) == 0
        out = capsys.readouterr().out
        assert out.count("ok ") == 12

    def test_single_row_selection(self, capsys):
        assert main(["table1", "--q", "500000", "--model", "vgg16"]) == 0
        out = capsys.readouterr().out
        assert "4427" in out and "1046" in out and "1.606" in out
        assert "resnet50" not in out

    def test_csv_export(self, tmp_path):
        assert main(["table1", "--csv", str(tmp_path / "t.csv")]) == 0
        assert (tmp_path / "t.csv").read_text().startswith("model,q")

    def test_check_requires_reference_parameters(self, capsys):
        assert main(["table1", "--check", "--s-bits", "16"]) == 1

    def test_halving_s_bits(self, capsys):
        assert main(["table1", "--s-bits", "16", "--q", "50000", "--model", "vgg16"]) == 0
        out = capsys.readouterr().out
        assert "2214" in out  # 4427 / 2


class TestOracleCommand:
    def test_prints_copies_and_random_values(self, capsys):
        assert main(["oracle", "--instances", "2", "--s", "1.0"]) == 0
        out = capsys.readouterr().out
        assert "binary copies" in out
        assert f"{-2 * np.log(2):.6f}" in out
