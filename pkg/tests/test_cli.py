import hashlib
import json
import os

import numpy as np
import pytest

from promptshift.cli import main
from promptshift.config import RunConfig, save_run_config


@pytest.fixture(scope="module")
def small_cfg_path(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("cfg") / "small.json")
    cfg = RunConfig()
    cfg.world.pairs = 9
    cfg.world.total_steps = 6
    cfg.world.vocab_size = 64
    cfg.model.total_steps = 6
    cfg.model.latent_channels = (6, 8)
    cfg.model.gn_groups = 2
    cfg.model.latent_feat = 32
    cfg.model.timestep_feat = 16
    cfg.model.classifier_hidden = 32
    cfg.model.delta_width = 32
    cfg.model.mask_hidden = 16
    cfg.model.mask_attn_dim = 16
    cfg.model.alpha_hidden = 8
    cfg.model.pos_dim = 8
    cfg.train.epochs = 1
    cfg.train.batch_size = 64
    save_run_config(cfg, path)
    return path


@pytest.fixture(scope="module")
def data_path(small_cfg_path, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data") / "world.srd")
    rc = main(["gen-data", "--config", small_cfg_path, "--seed", "3", "--out", path])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def ckpt_dir(small_cfg_path, data_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    rc = main(["train", "--config", small_cfg_path, "--data", data_path, "--out", out])
    assert rc == 0
    return out


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestGenData:
    def test_summary_counts(self, small_cfg_path, tmp_path, capsys):
        out = str(tmp_path / "w.srd")
        rc = main(["gen-data", "--config", small_cfg_path, "--seed", "1", "--out", out])
        captured = capsys.readouterr().out
        assert rc == 0
        # 9 pairs * 2 variants * 2 seeds * 2 copies * 6 steps
        assert "items: 432" in captured
        assert "beta=0.9" in captured

    def test_same_seed_identical_file_hash(self, small_cfg_path, tmp_path):
        a = str(tmp_path / "a.srd")
        b = str(tmp_path / "b.srd")
        assert main(["gen-data", "--config", small_cfg_path, "--seed", "7", "--out", a]) == 0
        assert main(["gen-data", "--config", small_cfg_path, "--seed", "7", "--out", b]) == 0
        assert sha(a) == sha(b)

    def test_invalid_beta_exit_code_and_diagnostic(self, tmp_path, capsys):
        cfg = RunConfig()
        cfg.world.beta = 0.9
        path = str(tmp_path / "cfg.json")
        save_run_config(cfg, path)
        doc = json.load(open(path))
        doc["world"]["beta"] = 0.4
        json.dump(doc, open(path, "w"))
        rc = main(["gen-data", "--config", path, "--seed", "0", "--out", str(tmp_path / "x.srd")])
        err = capsys.readouterr().err
        assert rc == 2
        assert "0.75" in err

    def test_env_seed_used_when_flag_absent(self, small_cfg_path, tmp_path, monkeypatch):
        a = str(tmp_path / "a.srd")
        b = str(tmp_path / "b.srd")
        monkeypatch.setenv("PROMPTSHIFT_SEED", "11")
        assert main(["gen-data", "--config", small_cfg_path, "--out", a]) == 0
        monkeypatch.delenv("PROMPTSHIFT_SEED")
        assert main(["gen-data", "--config", small_cfg_path, "--seed", "11", "--out", b]) == 0
        assert sha(a) == sha(b)

    def test_flag_overrides_env_seed(self, small_cfg_path, tmp_path, monkeypatch):
        a = str(tmp_path / "a.srd")
        b = str(tmp_path / "b.srd")
        monkeypatch.setenv("PROMPTSHIFT_SEED", "99")
        assert main(["gen-data", "--config", small_cfg_path, "--seed", "11", "--out", a]) == 0
        monkeypatch.delenv("PROMPTSHIFT_SEED")
        assert main(["gen-data", "--config", small_cfg_path, "--seed", "11", "--out", b]) == 0
        assert sha(a) == sha(b)


class TestTrainEval:
    def test_train_writes_checkpoint_and_log(self, ckpt_dir):
        assert os.path.exists(os.path.join(ckpt_dir, "model.ckpt"))
        log = json.load(open(os.path.join(ckpt_dir, "train_log.json")))
        assert log["epochs"][0]["epoch"] == 1
        assert "loss_curve_hash" in log

    def test_ablate_flag_zeroes_term_in_log(self, small_cfg_path, data_path, tmp_path, capsys):
        out = str(tmp_path / "run")
        rc = main(["train", "--config", small_cfg_path, "--data", data_path, "--out", out,
                   "--ablate", "no_mask"])
        assert rc == 0
        log = json.load(open(os.path.join(out, "train_log.json")))
        for epoch in log["epochs"]:
            assert epoch["terms"]["mask"] == 0.0

    def test_unknown_ablation_rejected(self, small_cfg_path, data_path, tmp_path, capsys):
        rc = main(["train", "--config", small_cfg_path, "--data", data_path,
                   "--out", str(tmp_path / "x"), "--ablate", "no_such"])
        assert rc == 2

    def test_eval_prints_metrics(self, small_cfg_path, data_path, ckpt_dir, capsys):
        rc = main(["eval", "--ckpt", os.path.join(ckpt_dir, "model.ckpt"),
                   "--data", data_path, "--split", "val", "--max-traces", "4",
                   "--cooldown", "2"])
        out = capsys.readouterr().out
        assert rc == 0
        for key in ("cls_accuracy", "mask_f1", "delta_cosine", "forget_rate"):
            assert key in out

    def test_missing_data_file_exit_3(self, small_cfg_path, tmp_path):
        rc = main(["train", "--config", small_cfg_path, "--data", str(tmp_path / "no.srd"),
                   "--out", str(tmp_path / "x")])
        assert rc == 3


class TestSimulate:
    def test_trace_json_written(self, data_path, ckpt_dir, tmp_path):
        trace_path = str(tmp_path / "trace.json")
        rc = main(["simulate", "--ckpt", os.path.join(ckpt_dir, "model.ckpt"),
                   "--world", data_path, "--T", "6", "--K", "2", "--alpha-scale", "1.0",
                   "--seed", "5", "--out", trace_path])
        assert rc == 0
        trace = json.load(open(trace_path))
        assert len(trace["steps"]) == 6
        assert trace["config"]["K"] == 2

    def test_same_seed_identical_trace_bytes(self, data_path, ckpt_dir, tmp_path):
        a = str(tmp_path / "a.json")
        b = str(tmp_path / "b.json")
        base = ["simulate", "--ckpt", os.path.join(ckpt_dir, "model.ckpt"),
                "--world", data_path, "--T", "6", "--K", "2", "--seed", "8"]
        assert main(base + ["--out", a]) == 0
        assert main(base + ["--out", b]) == 0
        assert sha(a) == sha(b)

    def test_bad_group_rejected(self, data_path, ckpt_dir, tmp_path):
        rc = main(["simulate", "--ckpt", os.path.join(ckpt_dir, "model.ckpt"),
                   "--world", data_path, "--group", "100000",
                   "--out", str(tmp_path / "t.json")])
        assert rc == 2


class TestParser:
    def test_help_lists_all_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("gen-data", "train", "eval", "simulate", "gradcheck"):
            assert cmd in out

    def test_subcommand_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--ckpt", "--world", "--T", "--K", "--alpha-scale", "--seed",
                     "--out", "--hard-mask", "--group"):
            assert flag in out

    def test_unknown_flag_is_an_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--out", "x", "--bogus-flag"])
        assert exc.value.code == 2


class TestGradcheckCommand:
    def test_tiny_config_passes(self, tmp_path, capsys):
        cfg = RunConfig()
        cfg.model.embed_dim = 16
        cfg.model.latent_shape = (2, 4, 4)
        cfg.model.latent_channels = (3, 4)
        cfg.model.gn_groups = 1
        cfg.model.latent_feat = 12
        cfg.model.timestep_feat = 8
        cfg.model.heads = 2
        cfg.model.classifier_hidden = 8
        cfg.model.delta_width = 16
        cfg.model.adapter_rank = 2
        cfg.model.mask_hidden = 8
        cfg.model.mask_attn_dim = 8
        cfg.model.alpha_hidden = 8
        cfg.model.pos_dim = 4
        cfg.model.dropout = 0.0
        cfg.model.max_len = 8
        cfg.world.pairs = 9
        path = str(tmp_path / "cfg.json")
        save_run_config(cfg, path)
        rc = main(["gradcheck", "--config", path, "--seed", "0"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "composite_loss" in out
        assert "all blocks within" in out
