import json

import numpy as np
import pytest

from fedckt.cli import main
from fedckt.runconfig import config_from_sections, load_config, parse_flat_toml
from fedckt.errors import ConfigurationError

SMOKE_TOML = """
[run]
algorithm = "perfed_ckt"
seed = 42

[data]
population = "dirichlet"
num_classes = 3
dim = 2
samples_per_class = 60
class_separation = 4.0
alpha = 10.0
num_clients = 2
public_pool_size = 30
public_offset = 1.0

[models]
kind = "softmax_linear"
init_scale = 0.05

[federation]
rounds = 1
local_iters = 2
num_selected = 2
batch_size = 8
public_batch_size = 8
distill_weight = 0.5
num_clusters = 1
lr = 0.05
"""

THEORY_TOML = """
[run]
algorithm = "theory_check"
seed = 5

[theory]
num_samples = 20000
lambda_points = 9
lambda_span = 3.0
alpha_resolution = 10
tolerance = 0.02
{extra}
[theory.task1]
num_clients = 3
dim = 2
sigma = 1.0
beta = 1.0
nu = 1.0
upsilon = [1.0, 1.0, 1.0]
n_samples = 6
client = 0
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParser:
    def test_sections_and_types(self):
        sections = parse_flat_toml(
            '[a]\nx = 1\ny = 2.5\nz = "s"\nflag = true\narr = [1, 2, 3]\n[b.c]\nk = -4\n'
        )
        assert sections["a"] == {"x": 1, "y": 2.5, "z": "s", "flag": True, "arr": [1, 2, 3]}
        assert sections["b.c"] == {"k": -4}

    def test_comments_and_blanks(self):
        sections = parse_flat_toml("# top\n[a]\nx = 1  # trailing\n\n")
        assert sections == {"a": {"x": 1}}

    @pytest.mark.parametrize(
        "text,fragment",
        [
            ("x = 1\n", "outside of any"),
            ("[a\nx = 1\n", "malformed section"),
            ("[a]\nnonsense\n", "expected"),
            ("[a]\nx = \n", "empty value"),
            ("[a]\nx = [1, 2\n", "unterminated array"),
            ("[a]\nx = zebra\n", "cannot parse"),
            ("[a]\nx = 1\nx = 2\n", "duplicate key"),
        ],
    )
    def test_malformed_lines_diagnosed(self, text, fragment):
        with pytest.raises(ConfigurationError, match=fragment):
            parse_flat_toml(text, source="cfg.toml")

    def test_diagnostics_carry_line_numbers(self):
        with pytest.raises(ConfigurationError, match="cfg.toml:3"):
            parse_flat_toml("[a]\nx = 1\nbroken line\n", source="cfg.toml")


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = write(tmp_path, "bad.toml", SMOKE_TOML + "\n[data]\n")
        # duplicate section merges; inject unknown key instead
        path.write_text(SMOKE_TOML.replace("public_offset = 1.0", "mystery = 1.0"))
        with pytest.raises(ConfigurationError, match="mystery"):
            load_config(path)

    def test_unknown_algorithm_rejected(self, tmp_path):
        path = write(tmp_path, "bad.toml", SMOKE_TOML.replace("perfed_ckt", "magic"))
        with pytest.raises(ConfigurationError, match="algorithm"):
            load_config(path)

    def test_seed_override(self, tmp_path):
        path = write(tmp_path, "smoke.toml", SMOKE_TOML)
        cfg = load_config(path, seed_override=7)
        assert cfg.seed == 7
        assert cfg.federation.seed == 7

    def test_json_roundtrip_preserves_config(self, tmp_path):
        from fedckt.runconfig import config_to_sections

        cfg = load_config(write(tmp_path, "smoke.toml", SMOKE_TOML))
        echoed = config_to_sections(cfg)
        rebuilt = config_from_sections(json.loads(json.dumps(echoed)))
        assert rebuilt == cfg


class TestRunCommand:
    def test_smoke_run_single_metrics_row(self, tmp_path):
        import time

        cfg = write(tmp_path, "smoke.toml", SMOKE_TOML)
        out = tmp_path / "out"
        start = time.time()
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        assert time.time() - start < 1.0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "round,mean_acc,std_acc,grad_norm,uplink,downlink"
        assert len(lines) == 2
        summary = json.loads((out / "summary.json").read_text())
        assert summary["config"]["run"]["seed"] == 42

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write(tmp_path, "smoke.toml", SMOKE_TOML)
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a/metrics.csv").read_bytes() == (
            tmp_path / "b/metrics.csv"
        ).read_bytes()

    def test_summary_config_refeeds_bit_exactly(self, tmp_path):
        cfg = write(tmp_path, "smoke.toml", SMOKE_TOML)
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        echoed = json.loads((tmp_path / "a/summary.json").read_text())["config"]
        refed = write(tmp_path, "refed.json", json.dumps(echoed))
        assert main(["run", "--config", str(refed), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a/metrics.csv").read_bytes() == (
            tmp_path / "b/metrics.csv"
        ).read_bytes()

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_malformed_config_exits_2(self, tmp_path, capsys):
        cfg = write(tmp_path, "bad.toml", "[run\nalgorithm=perfed_ckt\n")
        assert main(["run", "--config", str(cfg)]) == 2
        assert "bad.toml:1" in capsys.readouterr().err

    def test_unwritable_out_exits_2(self, tmp_path):
        cfg = write(tmp_path, "smoke.toml", SMOKE_TOML)
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["run", "--config", str(cfg), "--out", str(blocker / "sub")]) == 2

    def test_divergence_exits_3(self, tmp_path, capsys):
        # a step size at the float ceiling overflows the first update
        cfg = write(tmp_path, "explode.toml", SMOKE_TOML.replace("lr = 0.05", "lr = 1e308"))
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 3
        assert "diverged" in capsys.readouterr().err

    def test_run_writes_checkpoints(self, tmp_path):
        cfg = write(tmp_path, "smoke.toml", SMOKE_TOML)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "checkpoints/manifest.json").read_text())
        assert len(manifest["clients"]) == 2
        blob = (out / "checkpoints" / manifest["clients"][0]["file"]).read_bytes()
        assert blob[:4] == b"FKPV"

    def test_cluster_sweep_comm_totals_follow_downlink_formula(self, tmp_path):
        totals = {}
        for c in (1, 2, 3):
            text = (
                SMOKE_TOML.replace("num_clusters = 1", f"num_clusters = {c}")
                .replace("num_clients = 2", "num_clients = 4")
                .replace("num_selected = 2", "num_selected = 3")
            )
            cfg = write(tmp_path, f"c{c}.toml", text)
            out = tmp_path / f"out{c}"
            assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
            summary = json.loads((out / "summary.json").read_text())
            totals[c] = summary["comm"]["total_scalars"]
        # T=1, m=3, |P|=30, N=3: total = m*P*N*(1+c)
        step = 3 * 30 * 3
        assert totals[2] - totals[1] == step
        assert totals[3] - totals[2] == step


class TestTheoryCheckCommand:
    def test_pass_and_report(self, tmp_path, capsys):
        cfg = write(tmp_path, "theory.toml", THEORY_TOML.format(extra=""))
        out = tmp_path / "t"
        assert main(["theory-check", "--config", str(cfg), "--out", str(out)]) == 0
        assert "PASS" in capsys.readouterr().out
        report = json.loads((out / "theory_report.json").read_text())
        assert report["all_passed"] is True
        task = report["tasks"][0]
        assert {"closed_form_loss", "relative_gap", "oracle", "closed_form"} <= set(task)
        assert np.isclose(task["closed_form"]["alpha_sum"], 1.0)

    def test_corrupted_lambda_fails(self, tmp_path, capsys):
        cfg = write(
            tmp_path,
            "theory.toml",
            THEORY_TOML.format(extra="corrupt_lambda_factor = 10.0\n"),
        )
        out = tmp_path / "t"
        assert main(["theory-check", "--config", str(cfg), "--out", str(out)]) == 1
        assert "FAIL" in capsys.readouterr().out
        report = json.loads((out / "theory_report.json").read_text())
        assert report["all_passed"] is False


class TestToyCommand:
    def test_csv_shape_and_win_rate(self, tmp_path, capsys):
        out = tmp_path / "toy"
        assert main(["toy", "--seed", "0", "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "win rate" in stdout
        lines = (out / "toy.csv").read_text().strip().splitlines()
        assert lines[0] == "seed,client,kind,w0,w1,dist_to_true"
        assert len(lines) == 1 + 4 * 3 * 10  # header + kinds x clients x seeds
        kinds = {line.split(",")[2] for line in lines[1:]}
        assert kinds == {"true", "fedavg", "uniform_kt", "clustered_kt"}
        # float cells parse cleanly
        float(lines[1].split(",")[3])


class TestShippedConfigs:
    def test_all_parse_and_validate(self):
        from pathlib import Path

        configs = sorted(Path(__file__).resolve().parents[1].glob("configs/*.toml"))
        assert len(configs) >= 5
        for path in configs:
            cfg = load_config(path)
            assert cfg.algorithm

    def test_smoke_config_runs(self, tmp_path):
        from pathlib import Path

        cfg = Path(__file__).resolve().parents[1] / "configs/smoke.toml"
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 0


class TestPartitionStatsCommand:
    def stats(self, tmp_path, alpha, clients, classes=10, samples=500, seed=3):
        text = (
            SMOKE_TOML.replace("alpha = 10.0", f"alpha = {alpha}")
            .replace("num_clients = 2", f"num_clients = {clients}")
            .replace("num_classes = 3", f"num_classes = {classes}")
            .replace("samples_per_class = 60", f"samples_per_class = {samples}")
        )
        cfg = write(tmp_path, "part.toml", text)
        out = tmp_path / f"stats-{alpha}"
        assert (
            main(
                [
                    "partition-stats",
                    "--config",
                    str(cfg),
                    "--out",
                    str(out),
                    "--seed",
                    str(seed),
                ]
            )
            == 0
        )
        return json.loads((out / "partition_stats.json").read_text())

    def test_uniform_limit(self, tmp_path):
        stats = self.stats(tmp_path, alpha=1e6, clients=10)
        assert abs(stats["mean_label_entropy"] - np.log(10)) <= 0.05 * np.log(10)

    def test_small_alpha_is_heavily_skewed(self, tmp_path):
        stats = self.stats(tmp_path, alpha=0.01, clients=100)
        assert stats["median_label_entropy"] < 0.7

    def test_json_has_one_entry_per_client(self, tmp_path):
        stats = self.stats(tmp_path, alpha=1.0, clients=7)
        assert len(stats["clients"]) == 7
