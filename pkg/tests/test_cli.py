import csv
import json

import pytest

from fedspectra.cli import main
from fedspectra.config import load_config, parse_config_text, serialize_config
from fedspectra.errors import ConfigError

TINY_CONFIG = """\
# fast test profile
profile = test
num_clients = 2
comm_interval = 2
total_epochs = 2
aggregator = fedavg
cto_enabled = true
arch = tiny_mlp
batch_size = 8
image_height = 8
image_width = 8
count_scale = 0.02
seed = 0
save_checkpoints = false
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


class TestConfigParsing:
    def test_defaults_and_overrides(self):
        cfg = parse_config_text("num_clients = 8\nlambda1 = 0.3")
        assert cfg.num_clients == 8
        assert cfg.lambda1 == 0.3
        assert cfg.aggregator == "cfa"  # default untouched

    def test_comments_and_blank_lines(self):
        cfg = parse_config_text("# heading\n\nseed = 7  # trailing\n")
        assert cfg.seed == 7

    def test_unknown_key_reports_line_number(self):
        with pytest.raises(ConfigError, match=r"<config>:3.*lamda1"):
            parse_config_text("seed = 1\n\nlamda1 = 0.5\n")

    def test_bad_value_reports_line_number(self):
        with pytest.raises(ConfigError, match=r"<config>:1"):
            parse_config_text("num_clients = four\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=r"<config>:2.*key = value"):
            parse_config_text("seed = 1\nnum_clients 4\n")

    def test_bool_values_strict(self):
        assert parse_config_text("jitter = false\n").jitter is False
        with pytest.raises(ConfigError, match="true/false"):
            parse_config_text("jitter = 1\n")

    def test_serialize_round_trips(self):
        cfg = parse_config_text("s0 = 0.31\nnum_clients = 6\njitter = false\n")
        again = parse_config_text(serialize_config(cfg))
        assert again == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.cfg")

    def test_validate_catches_interval_mismatch(self):
        cfg = parse_config_text("comm_interval = 7\ntotal_epochs = 10\n")
        with pytest.raises(ConfigError):
            cfg.validate()


class TestRunCommand:
    def test_success_writes_artifacts(self, tiny_cfg, tmp_path, capsys):
        out = tmp_path / "run1"
        rc = main(["run", "--config", str(tiny_cfg), "--out", str(out)])
        assert rc == 0
        assert (out / "metrics.csv").exists()
        assert (out / "events.jsonl").exists()
        resolved = load_config(out / "resolved_config.txt")
        assert resolved.out_dir == str(out)
        assert resolved.num_clients == 2

    def test_metrics_schema(self, tiny_cfg, tmp_path):
        out = tmp_path / "run2"
        main(["run", "--config", str(tiny_cfg), "--out", str(out)])
        with open(out / "metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        # 1 round x 2 clients x 2 models x 2 splits
        assert len(rows) == 8
        assert set(rows[0]) == {
            "round",
            "epoch",
            "client_id",
            "model",
            "split",
            "accuracy",
            "macro_f1",
            "macro_auc",
            "loss",
        }

    def test_set_override_applied(self, tiny_cfg, tmp_path):
        out = tmp_path / "run3"
        rc = main(
            [
                "run",
                "--config",
                str(tiny_cfg),
                "--set",
                "total_epochs=4",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        resolved = load_config(out / "resolved_config.txt")
        assert resolved.total_epochs == 4
        with open(out / "metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert {r["round"] for r in rows} == {"1", "2"}

    def test_seed_flag_overrides_config(self, tiny_cfg, tmp_path):
        out = tmp_path / "run4"
        main(["run", "--config", str(tiny_cfg), "--seed", "9", "--out", str(out)])
        assert load_config(out / "resolved_config.txt").seed == 9

    def test_unknown_set_key_exits_2(self, tiny_cfg, tmp_path, capsys):
        rc = main(
            [
                "run",
                "--config",
                str(tiny_cfg),
                "--set",
                "lamda1=0.5",
                "--out",
                str(tmp_path / "x"),
            ]
        )
        assert rc == 2
        assert "lamda1" in capsys.readouterr().err

    def test_parse_error_exits_2_with_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("seed = 1\nnum_clients = banana\n")
        rc = main(["run", "--config", str(bad), "--out", str(tmp_path / "y")])
        assert rc == 2
        err = capsys.readouterr().err
        assert f"{bad}:2" in err

    def test_invalid_combination_exits_2(self, tiny_cfg, tmp_path, capsys):
        rc = main(
            [
                "run",
                "--config",
                str(tiny_cfg),
                "--set",
                "comm_interval=3",
                "--out",
                str(tmp_path / "z"),
            ]
        )
        assert rc == 2

    def test_determinism_across_invocations(self, tiny_cfg, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(tiny_cfg), "--out", str(out_a)])
        main(["run", "--config", str(tiny_cfg), "--out", str(out_b)])
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
        assert (out_a / "events.jsonl").read_bytes() == (out_b / "events.jsonl").read_bytes()


class TestSweepCommand:
    def test_sweep_writes_per_count_runs_and_summary(self, tiny_cfg, tmp_path):
        out = tmp_path / "sweep"
        rc = main(
            ["sweep", "--config", str(tiny_cfg), "--clients", "1,2", "--out", str(out)]
        )
        assert rc == 0
        assert (out / "n1" / "metrics.csv").exists()
        assert (out / "n2" / "metrics.csv").exists()
        with open(out / "sweep.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["n_clients"] for r in rows] == ["1", "2"]
        for r in rows:
            assert r["aggregator"] == "fedavg"
            assert r["cto_enabled"] == "true"
            assert 0.0 <= float(r["macro_f1"]) <= 1.0

    def test_sweep_row_matches_run_metrics(self, tiny_cfg, tmp_path):
        out = tmp_path / "sweep2"
        main(["sweep", "--config", str(tiny_cfg), "--clients", "2", "--out", str(out)])
        with open(out / "sweep.csv", newline="") as f:
            sweep_row = list(csv.DictReader(f))[0]
        with open(out / "n2" / "metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        final = max(int(r["round"]) for r in rows)
        sel = [
            r
            for r in rows
            if int(r["round"]) == final
            and r["model"] == "personalized"
            and r["split"] == "test"
        ]
        mean_f1 = sum(float(r["macro_f1"]) for r in sel) / len(sel)
        assert float(sweep_row["macro_f1"]) == pytest.approx(mean_f1, abs=1e-12)

    def test_bad_clients_list_exits_2(self, tiny_cfg, tmp_path, capsys):
        rc = main(
            [
                "sweep",
                "--config",
                str(tiny_cfg),
                "--clients",
                "2,zebra",
                "--out",
                str(tmp_path / "s"),
            ]
        )
        assert rc == 2


class TestReportCommand:
    def test_report_prints_avg_and_writes_summary(self, tiny_cfg, tmp_path, capsys):
        out = tmp_path / "run"
        main(["run", "--config", str(tiny_cfg), "--out", str(out)])
        rc = main(["report", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "model=personalized" in printed
        assert "Avg" in printed
        summary = json.loads((out / "summary.json").read_text())
        assert summary["model"] == "personalized"
        assert set(summary["clients"]) == {"0", "1"}
        for key in ("accuracy", "macro_f1", "macro_auc"):
            expected = sum(v[key] for v in summary["clients"].values()) / 2
            assert summary["avg"][key] == pytest.approx(expected, abs=1e-12)

    def test_report_missing_dir_exits_1(self, tmp_path, capsys):
        rc = main(["report", str(tmp_path / "nope")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_report_empty_csv_exits_1(self, tmp_path, capsys):
        run_dir = tmp_path / "empty"
        run_dir.mkdir()
        (run_dir / "metrics.csv").write_text(
            "round,epoch,client_id,model,split,accuracy,macro_f1,macro_auc,loss\n"
        )
        rc = main(["report", str(run_dir)])
        assert rc == 1


class TestGenDataCommand:
    def test_gen_data_then_ingest(self, tiny_cfg, tmp_path):
        data_dir = tmp_path / "data"
        rc = main(["gen-data", "--config", str(tiny_cfg), "--out", str(data_dir)])
        assert rc == 0
        assert (data_dir / "client_0" / "labels.csv").exists()

        run_out = tmp_path / "run"
        rc = main(
            [
                "run",
                "--config",
                str(tiny_cfg),
                "--set",
                f"dataset_dir={data_dir}",
                "--out",
                str(run_out),
            ]
        )
        assert rc == 0
        assert (run_out / "metrics.csv").exists()

    def test_gen_data_matches_in_memory_generation(self, tiny_cfg, tmp_path):
        import numpy as np

        from fedspectra.config import load_config as _load
        from fedspectra.datasynth import generate, load_dataset

        data_dir = tmp_path / "data"
        main(["gen-data", "--config", str(tiny_cfg), "--out", str(data_dir)])
        cfg = _load(tiny_cfg)
        expected = generate(cfg.synth_spec())
        loaded = load_dataset(data_dir)
        for pa, pb in zip(expected, loaded):
            for split in ("train", "val", "test"):
                assert np.array_equal(pa.split(split).images, pb.split(split).images)
                assert np.array_equal(pa.split(split).labels, pb.split(split).labels)
