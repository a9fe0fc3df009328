import json
import subprocess
import sys

import pytest

from tmlc.cli import main


@pytest.fixture
def config(tmp_path):
    doc = {"experiment_id": "cli", "dataset": {"per_class": 30, "test_per_class": 30},
           "model": {"epochs": 4, "batch_size": 32},
           "meta": {"hidden_size": 4, "warmup_epochs": 1, "mode": "agnostic"},
           "meta_test": {"warmup_epochs": 1}, "seeds": [0, 1], "out": str(tmp_path / "default_out"),
           "ablations": ["tmlc_wo_sd"],
           "transfer": {"sources": [{"name": "s"}], "targets": [{"name": "t", "noise": {"rate": 0.2}}]}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["baseline", "--frob"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_config_names_path(self, tmp_path, capsys):
        assert main(["baseline", "--config", str(tmp_path / "absent.json")]) == 1
        assert "absent.json" in capsys.readouterr().err

    def test_bad_config_value(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"model": {"epochs": 3, "width": 9}}')
        assert main(["baseline", "--config", str(path)]) == 1

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["baseline", "--config", str(path)]) == 1

    def test_runtime_failure(self, tmp_path, capsys):
        path = tmp_path / "diverge.json"
        path.write_text(json.dumps({"dataset": {"per_class": 20}, "model": {"epochs": 3, "optimizer": {
            "learning_rate": 1e305}}}))
        with pytest.warns(RuntimeWarning):
            assert main(["baseline", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "runtime error" in capsys.readouterr().err

    def test_help(self):
        assert main(["--help"]) == 0


class TestSubcommands:
    def test_meta_train_then_meta_test(self, config, tmp_path, capsys):
        out = tmp_path / "mt"
        assert main(["meta-train", "--config", str(config), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"experiment_id", "config_hash", "metrics", "wallclock_s"}
        assert summary["metrics"]["seeds"] == [0, 1]
        assert (out / "seed_1" / "tmlc.csv").exists() and (out / "seed_1" / "tmlc.meta.json").exists()
        assert len(list((out / "seed_0" / "snapshots").glob("phi_e*.json"))) == 3
        snaps = str(out / "seed_{seed}" / "snapshots")
        assert main(["meta-test", "--config", str(config), "--out", str(tmp_path / "test"), "--snapshots", snaps]) == 0
        assert (tmp_path / "test" / "seed_0" / "tmlc_meta_test.csv").exists()

    def test_meta_test_without_snapshots(self, config, tmp_path):
        assert main(["meta-test", "--config", str(config), "--out", str(tmp_path / "x")]) == 1

    def test_seed_override(self, config, tmp_path):
        assert main(["baseline", "--config", str(config), "--seed", "7", "--out", str(tmp_path / "b")]) == 0
        assert [p.name for p in (tmp_path / "b").iterdir() if p.is_dir()] == ["seed_7"]

    def test_mode_flags_reach_config(self, config, tmp_path):
        out = tmp_path / "flags"
        assert main(["meta-train", "--config", str(config), "--seed", "0", "--out", str(out), "--mode", "standard",
                     "--meta-supervision", "clean_meta", "--lookahead"]) == 0
        meta = json.loads((out / "seed_0" / "tmlc.meta.json").read_text())
        assert meta == {"method": "tmlc", "mode": "standard", "meta_supervision": "clean_meta", "lookahead": True,
                        "variant": "full"}

    def test_ablate(self, config, tmp_path, capsys):
        assert main(["ablate", "--config", str(config), "--seed", "0", "--out", str(tmp_path / "ab")]) == 0
        assert "tmlc_wo_sd" in capsys.readouterr().out
        assert (tmp_path / "ab" / "seed_0" / "tmlc_wo_sd.csv").exists()

    def test_transfer(self, config, tmp_path):
        out = tmp_path / "tr"
        assert main(["transfer", "--config", str(config), "--out", str(out), "--jobs", "2"]) == 0
        assert (out / "transfer_accuracy.csv").read_text().splitlines()[0] == "source,t"
        assert main(["transfer", "--config", str(config), "--out", str(out), "--jobs", "0"]) == 1

    def test_gen_data(self, config, tmp_path):
        out = tmp_path / "data"
        assert main(["gen-data", "--config", str(config), "--out", str(out)]) == 0
        first = json.loads((out / "train_seed0.jsonl").read_text().splitlines()[0])
        assert set(first) == {"features", "y", "y_noisy"}
        assert (out / "test_seed1.jsonl").exists()

    def test_report(self, config, tmp_path, capsys):
        out = tmp_path / "rep"
        assert main(["baseline", "--config", str(config), "--out", str(out)]) == 0
        capsys.readouterr()
        assert main(["report", "--dir", str(out)]) == 0
        text = capsys.readouterr().out
        assert text.splitlines()[1].startswith("ce")
        assert (out / "report.csv").read_text().startswith("method,runs")
        assert main(["report", "--dir", str(tmp_path / "nowhere")]) == 1

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--instances", "1"]) == 0
        assert "max relative error" in capsys.readouterr().out.splitlines()[-1]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tmlc", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1
