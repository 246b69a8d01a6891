import csv
import subprocess
import sys

import numpy as np
import pytest

import tokencore as tc
from tokencore import fileio
from tokencore.cli import main


def run_cli(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def points4_file(tmp_path):
    path = tmp_path / "points4.pyrm"
    fileio.write_matrix(path, np.array([[0.0], [4.0], [5.0], [10.0]]))
    return str(path)


class TestGenConfigs:
    def test_default_suite(self, tmp_path, capsys):
        out_path = tmp_path / "configs.csv"
        code, _, _ = run_cli(["gen-configs", "--out", str(out_path)], capsys)
        assert code == 0
        lines = out_path.read_text().strip().split("\n")
        assert len(lines) == 31  # header + 30 rows
        row_315 = lines[2].split(",")
        assert row_315[:5] == ["3", "0.15", "68", "36", "19"]

    def test_ceil_mode(self, tmp_path, capsys):
        out_path = tmp_path / "configs.csv"
        code, _, _ = run_cli(
            ["gen-configs", "--rounding", "ceil", "--out", str(out_path)], capsys
        )
        assert code == 0
        row_315 = out_path.read_text().strip().split("\n")[2].split(",")
        assert row_315[:5] == ["3", "0.15", "69", "37", "20"]


class TestSelect:
    def test_coreset_fixture(self, points4_file, capsys):
        code, out, _ = run_cli(
            ["select", "--input", points4_file, "--k", "2", "--m", "1",
             "--method", "coreset"],
            capsys,
        )
        assert code == 0
        lines = out.strip().split("\n")
        assert lines[0] == "indices,0,3"
        assert lines[2] == "cover_radius,5"

    def test_first_k(self, points4_file, capsys):
        code, out, _ = run_cli(
            ["select", "--input", points4_file, "--k", "3", "--method", "first-k"],
            capsys,
        )
        assert code == 0
        assert out.startswith("indices,0,1,2")

    def test_k_too_large_exits_2(self, points4_file, capsys):
        code, _, err = run_cli(
            ["select", "--input", points4_file, "--k", "9"], capsys
        )
        assert code == 2
        assert "out of range" in err

    def test_missing_file_exits_1(self, capsys, tmp_path):
        code, _, err = run_cli(
            ["select", "--input", str(tmp_path / "nope.pyrm"), "--k", "2"], capsys
        )
        assert code == 1


class TestPareto:
    @pytest.fixture
    def fixture_csv(self, tmp_path):
        path = tmp_path / "records.csv"
        path.write_text("speedup,accuracy\n1.0,0.90\n2.0,0.80\n1.5,0.70\n")
        return str(path)

    def test_interpolation_and_na(self, fixture_csv, capsys):
        code, out, _ = run_cli(
            ["pareto", "--input", fixture_csv, "--targets", "1.5,3.0"], capsys
        )
        assert code == 0
        lines = out.strip().split("\n")
        assert lines[0] == "target,accuracy"
        assert lines[1] == "1.5,0.85"
        assert lines[2] == "3,NA"

    def test_missing_column_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        code, _, err = run_cli(["pareto", "--input", str(path), "--targets", "1"], capsys)
        assert code == 2


class TestBoundCheck:
    def test_all_duplicates_fixture_reports_zero(self, tmp_path, capsys):
        cfg = tmp_path / "bound.cfg"
        cfg.write_text(
            "all_duplicates = true\n"
            "n_examples = 5\n"
            "p = 0.25\n"
            "prune_upto = 2\n"
        )
        code, out, _ = run_cli(["bound-check", "--config", str(cfg)], capsys)
        assert code == 0
        lines = dict(
            line.split(",", 1) for line in out.strip().split("\n") if "," in line
        )
        assert lines["mean_loss_gap"] == "0"
        assert lines["max_delta"] == "0"
        assert lines["mean_assembled_bound"] == "0"
        assert lines["ap0_violations"] == "0"

    def test_random_stack_audit_passes(self, tmp_path, capsys):
        cfg = tmp_path / "bound.cfg"
        cfg.write_text("n_examples = 4\np = 0.5\nprune_upto = 2\nredundancy = 0.5\n")
        code, out, _ = run_cli(["bound-check", "--config", str(cfg)], capsys)
        assert code == 0
        assert "ap0_violations,0" in out

    def test_training_divergence_exits_3(self, tmp_path, capsys, monkeypatch):
        from tokencore import cli
        from tokencore.errors import TrainingFailureError

        def boom(*args, **kwargs):
            raise TrainingFailureError(1)

        monkeypatch.setattr(cli.harness, "finetune", boom)
        cfg = tmp_path / "bound.cfg"
        cfg.write_text("train = true\nn_examples = 2\nseq_len = 8\nlayers = 2\n")
        code, _, err = run_cli(["bound-check", "--config", str(cfg)], capsys)
        assert code == 3
        assert "diverged" in err


class TestSweepCommand:
    SWEEP_CFG = (
        "selectors = coreset:m=1,first_k\n"
        "p_values = 0.5\n"
        "prune_upto = 1\n"
        "seeds = 0,1\n"
        "seq_len = 16\n"
        "layers = 2\n"
        "dim = 16\n"
        "ffn_dim = 24\n"
        "epochs = 1\n"
        "batch_size = 8\n"
        "n_train = 16\n"
        "n_eval = 16\n"
    )

    def test_sweep_writes_rows(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.cfg"
        cfg.write_text(self.SWEEP_CFG)
        out_csv = tmp_path / "out.csv"
        code, _, _ = run_cli(
            ["sweep", "--config", str(cfg), "--out", str(out_csv), "--no-timing"],
            capsys,
        )
        assert code == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4  # 2 selectors x 1 schedule x 2 seeds
        assert all(r["error"] == "" for r in rows)

    def test_rerun_is_byte_identical_without_timing(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.cfg"
        cfg.write_text(self.SWEEP_CFG)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run_cli(["sweep", "--config", str(cfg), "--out", str(a), "--no-timing"], capsys)
        run_cli(["sweep", "--config", str(cfg), "--out", str(b), "--no-timing"], capsys)
        assert a.read_bytes() == b.read_bytes()

    def test_config_error_reports_line(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.cfg"
        cfg.write_text("selectors = coreset\nthis is broken\n")
        code, _, err = run_cli(
            ["sweep", "--config", str(cfg), "--out", str(tmp_path / "x.csv")], capsys
        )
        assert code == 2
        assert "line 2" in err


class TestAblateAndRedundancy:
    def test_ablate_importance_writes_curve(self, tmp_path, capsys):
        cfg = tmp_path / "ablate.cfg"
        cfg.write_text(
            "seq_len = 8\nlayers = 2\ndim = 16\nffn_dim = 24\n"
            "n_examples = 12\nencoder_layers = 1\ntrain = false\n"
        )
        out_csv = tmp_path / "curve.csv"
        code, out, _ = run_cli(
            ["ablate-importance", "--config", str(cfg), "--out", str(out_csv)], capsys
        )
        assert code == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 7  # seq_len - 1 ranks
        assert "spearman" in out

    def test_redundancy_outputs(self, tmp_path, capsys):
        cfg = tmp_path / "red.cfg"
        cfg.write_text(
            "seq_len = 8\nlayers = 2\ndim = 16\nffn_dim = 24\n"
            "n_examples = 6\nlayers_probed = 1,2\ntrain = false\n"
        )
        prefix = str(tmp_path / "red")
        code, _, _ = run_cli(
            ["redundancy", "--config", str(cfg), "--out-prefix", prefix], capsys
        )
        assert code == 0
        hist = (tmp_path / "red_layer1.hist").read_text().strip().split("\n")
        assert hist[0].startswith("#")
        assert len(hist) == 21  # header + 20 bins
        clusters = (tmp_path / "red_clusters.csv").read_text().strip().split("\n")
        assert clusters[0] == "layer,example,clusters"
        assert len(clusters) == 1 + 2 * 6


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        out_path = tmp_path / "c.csv"
        proc = subprocess.run(
            [sys.executable, "-m", "tokencore", "gen-configs", "--out", str(out_path)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert out_path.exists()

    def test_bad_flag_exit_code(self):
        proc = subprocess.run(
            [sys.executable, "-m", "tokencore", "select", "--nonsense"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2
