import hashlib
import json

import numpy as np
import pytest

from moectl import data, imgio
from moectl.cli import main
from moectl.config import RunConfig


@pytest.fixture()
def tiny_config(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(
        "[model]\n"
        "vocab_size = 64\ndim = 8\nmax_len = 8\nn_experts = 2\n"
        "expert_hidden = 8\nchannels = 4\nattn_dim = 4\ntime_dim = 4\n"
        "image_size = 8\ntimesteps = 10\nseed = 1\n"
        "[train]\nsteps = 5\nseed = 1\n"
        "[filter]\nmin_height = 1\nmin_width = 1\n"
        "min_aesthetic = 0.0\nmin_clip = -1.0\n"
        "[corpus]\nper_family = 3\nseed = 1\n")
    return cfg


@pytest.fixture()
def built_dataset(tmp_path, tiny_config):
    out = tmp_path / "ds"
    assert main(["dataset", "build", "--config", str(tiny_config),
                 "--out", str(out)]) == 0
    return out / "manifest.jsonl"


class TestDatasetBuild:
    def test_per_family_flag(self, tmp_path, tiny_config):
        out = tmp_path / "ds10"
        rc = main(["dataset", "build", "--config", str(tiny_config),
                   "--out", str(out), "--per-family", "10"])
        assert rc == 0
        lines = (out / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 30

    def test_rerun_identical_checksum(self, tmp_path, tiny_config):
        sums = []
        for name in ("x", "y"):
            out = tmp_path / name
            assert main(["dataset", "build", "--config", str(tiny_config),
                         "--out", str(out)]) == 0
            sums.append(hashlib.sha256(
                (out / "manifest.jsonl").read_bytes()).hexdigest())
        assert sums[0] == sums[1]

    def test_unwritable_out_dir_exit_3(self, tmp_path, tiny_config):
        blocker = tmp_path / "blocked"
        blocker.write_text("file, not a directory")
        rc = main(["dataset", "build", "--config", str(tiny_config),
                   "--out", str(blocker / "sub")])
        assert rc == 3

    def test_bad_config_exit_2(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\ndim = not_a_number\n")
        rc = main(["dataset", "build", "--config", str(cfg),
                   "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_missing_config_file_exit_2(self, tmp_path):
        rc = main(["dataset", "build", "--config", str(tmp_path / "nope.ini"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2


class TestTrainEditEval:
    def test_train_then_edit_and_heatmap(self, tmp_path, tiny_config,
                                         built_dataset):
        run = tmp_path / "run"
        assert main(["train", "--config", str(tiny_config),
                     "--data", str(built_dataset), "--out", str(run)]) == 0
        assert (run / "model.ckpt").exists()
        assert (run / "loss_curve.csv").exists()
        assert (run / "loss_curve.png").exists()

        src = built_dataset.parent / "images"
        src_img = sorted(src.glob("*_src.png"))[0]
        out_img = tmp_path / "edited.png"
        hm_dir = tmp_path / "heatmaps"
        rc = main(["edit", "--ckpt", str(run / "model.ckpt"),
                   "--image", str(src_img),
                   "--instruction", "turn it into comic style",
                   "--out", str(out_img), "--steps", "3",
                   "--heatmap", str(hm_dir)])
        assert rc == 0
        assert out_img.exists()
        assert (hm_dir / "heatmap.json").exists()
        assert len(list(hm_dir.glob("token*.png"))) >= 2

    def test_edit_missing_checkpoint_exit_3(self, tmp_path, built_dataset):
        src_img = sorted((built_dataset.parent / "images").glob("*_src.png"))[0]
        rc = main(["edit", "--ckpt", str(tmp_path / "missing.ckpt"),
                   "--image", str(src_img), "--instruction", "x y",
                   "--out", str(tmp_path / "o.png")])
        assert rc == 3

    def test_eval_command(self, tmp_path, built_dataset):
        samples = data.load_manifest(built_dataset, kept_only=True)
        d = tmp_path / "methodA"
        d.mkdir()
        for s in samples:
            imgio.save_image(d / f"{s.id}.png", s.tgt_image)
        rc = main(["eval", "--manifest", str(built_dataset),
                   "--methods", f"methodA={d}",
                   "--out", str(tmp_path / "report")])
        assert rc == 0
        table = json.loads((tmp_path / "report" / "report_table.json")
                           .read_text())
        assert "methodA" in table

    def test_routing_report_command(self, tmp_path, tiny_config,
                                    built_dataset):
        run = tmp_path / "run"
        assert main(["train", "--config", str(tiny_config),
                     "--data", str(built_dataset), "--out", str(run)]) == 0
        rc = main(["routing-report", "--ckpt", str(run / "model.ckpt"),
                   "--manifest", str(built_dataset),
                   "--out", str(tmp_path / "routing")])
        assert rc == 0
        records = (tmp_path / "routing" / "routing_records.jsonl") \
            .read_text().splitlines()
        assert len(records) == len(data.load_manifest(built_dataset,
                                                      kept_only=True))

    def test_ablate_w_command(self, tmp_path, tiny_config, built_dataset):
        out = tmp_path / "sweep"
        rc = main(["ablate-w", "--config", str(tiny_config),
                   "--ws", "0,0.5", "--data", str(built_dataset),
                   "--out", str(out), "--probes", "2", "--steps", "3"])
        assert rc == 0
        sweep = json.loads((out / "w_sweep.json").read_text())
        assert [r["w"] for r in sweep] == [0.0, 0.5]
        assert (out / "w_sweep_grid.png").exists()

    def test_ablate_w_bad_ws_exit_2(self, tmp_path, tiny_config,
                                    built_dataset):
        rc = main(["ablate-w", "--config", str(tiny_config),
                   "--ws", "0,oops", "--data", str(built_dataset),
                   "--out", str(tmp_path / "s")])
        assert rc == 2


class TestGradCheck:
    def test_grad_check_passes(self, capsys):
        rc = main(["grad-check", "--seed", "0"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "max relative gradient error" in out


class TestSeedOverride:
    def test_env_seed_applies(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MOECTL_SEED", "77")
        cfg = RunConfig(None)
        assert cfg.model.seed == 77
        assert cfg.train.seed == 77
        assert cfg.corpus["seed"] == 77

    def test_bad_env_seed_rejected(self, monkeypatch):
        from moectl.errors import ConfigError
        monkeypatch.setenv("MOECTL_SEED", "abc")
        with pytest.raises(ConfigError):
            RunConfig(None)
