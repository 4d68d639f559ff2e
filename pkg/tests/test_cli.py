"""End-to-end command-line behavior on tiny configurations."""

import json
import os

import numpy as np
import pytest

from gram.cli import main, parse_run_config
from gram.errors import ConfigError

TINY_INI = """\
[model]
d_model = 16
n_puzzle_tokens = 4
k_low_steps = 1
t_high_steps = 1
n_sup = 2
n_heads = 2
n_layers = 1
core_kind = attention
guidance = {guidance}

[train]
lr = 3e-3
weight_decay = 0.0
batch_size = 16
epochs = {epochs}
ema_decay = 0.9
beta = 0.07
seed = {seed}
eval_every = {eval_every}

[run]
train_data = {train_data}
test_data = {test_data}
"""


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(["gen-data", "nqueens", "--n", "6", "--remove", "2,3", "--seed", "1",
               "--out", str(out)])
    assert rc == 0
    return out


def write_cfg(tmp_path, data_dir, name="cfg.ini", guidance="full", epochs=1, seed=0,
              eval_every=0):
    cfg = tmp_path / name
    cfg.write_text(TINY_INI.format(guidance=guidance, epochs=epochs, seed=seed,
                                   eval_every=eval_every,
                                   train_data=data_dir / "train.txt",
                                   test_data=data_dir / "test.txt"))
    return cfg


class TestGenData:
    def test_split_leakage_free(self, data_dir):
        train = (data_dir / "train.txt").read_text().splitlines()
        test = (data_dir / "test.txt").read_text().splitlines()
        tr = {line.split(";")[0] for line in train}
        te = {line.split(";")[0] for line in test}
        assert tr and te and not (tr & te)

    def test_histogram_sums_to_instances(self, data_dir):
        meta = json.loads((data_dir / "train.txt.meta.json").read_text())
        n = len((data_dir / "train.txt").read_text().splitlines())
        assert sum(meta["solution_histogram"].values()) == n

    def test_regeneration_byte_identical(self, data_dir, tmp_path):
        rc = main(["gen-data", "nqueens", "--n", "6", "--remove", "2,3", "--seed", "1",
                   "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "train.txt").read_bytes() == (data_dir / "train.txt").read_bytes()
        assert (tmp_path / "test.txt.solutions").read_bytes() == \
            (data_dir / "test.txt.solutions").read_bytes()


class TestConfigParsing:
    def test_ini_and_json_agree(self, tmp_path, data_dir):
        ini = write_cfg(tmp_path, data_dir)
        cfg_a = parse_run_config(str(ini))
        blob = {
            "model": {"d_model": 16, "n_puzzle_tokens": 4, "k_low_steps": 1,
                      "t_high_steps": 1, "n_sup": 2, "n_heads": 2, "n_layers": 1,
                      "core_kind": "attention", "guidance": "full"},
            "train": {"lr": 3e-3, "weight_decay": 0.0, "batch_size": 16, "epochs": 1,
                      "ema_decay": 0.9, "beta": 0.07, "seed": 0, "eval_every": 0},
            "run": {"train_data": str(data_dir / "train.txt"),
                    "test_data": str(data_dir / "test.txt")},
        }
        jpath = tmp_path / "cfg.json"
        jpath.write_text(json.dumps(blob))
        cfg_b = parse_run_config(str(jpath))
        assert cfg_a.model == cfg_b.model
        assert cfg_a.train == cfg_b.train

    def test_unknown_key_rejected(self, tmp_path, data_dir):
        cfg = tmp_path / "bad.ini"
        cfg.write_text(write_cfg(tmp_path, data_dir).read_text() + "\nbogus_key = 1\n")
        with pytest.raises(ConfigError, match="bogus_key"):
            parse_run_config(str(cfg))

    def test_seq_len_filled_from_dataset(self, tmp_path, data_dir):
        cfg = parse_run_config(str(write_cfg(tmp_path, data_dir)))
        assert cfg.model.seq_len == 36 and cfg.model.vocab_size == 3

    def test_config_error_exit_code(self, tmp_path, data_dir):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nnot_a_key = 3\n\n[run]\ntrain_data = x\n")
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert rc == 2


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_cfg(tmp, data_dir, epochs=1, eval_every=4)
    out = tmp / "rundir"
    rc = main(["train", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    return out


class TestTrainEvalCycle:
    def test_run_directory_contents(self, run_dir):
        assert (run_dir / "config.json").exists()
        assert (run_dir / "ckpt_final.bin").exists()
        lines = (run_dir / "metrics.jsonl").read_text().splitlines()
        kinds = {json.loads(l)["kind"] for l in lines}
        assert "train" in kinds and "eval" in kinds

    def test_eval_command(self, run_dir, data_dir, tmp_path):
        out = tmp_path / "metrics.json"
        rc = main(["eval", "--ckpt", str(run_dir / "ckpt_final.bin"),
                   "--data", str(data_dir / "test.txt"), "--width", "3",
                   "--depth", "2", "--seed", "5", "--out", str(out)])
        assert rc == 0
        blob = json.loads(out.read_text())
        assert set(blob) >= {"accuracy", "coverage", "n_samples"}
        assert blob["n_samples"] == 3

    def test_sample_command_emits_width_predictions(self, run_dir, data_dir, tmp_path):
        out = tmp_path / "preds.txt"
        rc = main(["sample", "--ckpt", str(run_dir / "ckpt_final.bin"),
                   "--data", str(data_dir / "test.txt"), "--width", "4",
                   "--depth", "2", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        n_inputs = len({l.split(";")[0] for l in lines})
        assert len(lines) == 4 * n_inputs

    def test_sweep_grid(self, run_dir, data_dir, tmp_path):
        out = tmp_path / "sweep.csv"
        rc = main(["sweep", "--ckpt", str(run_dir / "ckpt_final.bin"),
                   "--data", str(data_dir / "test.txt"), "--depths", "1,2",
                   "--widths", "1,2,4", "--selector", "vote", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + 6  # header + |depths| x |widths|

    def test_dump_rows(self, run_dir, data_dir, tmp_path):
        out = tmp_path / "traj.csv"
        rc = main(["dump", "--ckpt", str(run_dir / "ckpt_final.bin"),
                   "--data", str(data_dir / "test.txt"), "--width", "2",
                   "--depth", "2", "--out", str(out)])
        assert rc == 0
        n_lines = len(out.read_text().splitlines()) - 1
        meta = json.loads((data_dir / "test.txt.meta.json").read_text())
        assert n_lines > 0 and n_lines % 2 == 0

    def test_resume_continues_steps(self, run_dir, data_dir, tmp_path):
        cfg = write_cfg(tmp_path, data_dir, epochs=1)
        out = tmp_path / "resumed"
        rc = main(["train", "--config", str(cfg), "--out", str(out),
                   "--resume", str(run_dir / "ckpt_final.bin")])
        assert rc == 0
        from gram.trainer import load_checkpoint
        first = load_checkpoint(str(run_dir / "ckpt_final.bin"))
        second = load_checkpoint(str(out / "ckpt_final.bin"))
        assert second.step > first.step

    def test_missing_checkpoint_is_data_error(self, data_dir, tmp_path):
        rc = main(["eval", "--ckpt", str(tmp_path / "nope.bin"),
                   "--data", str(data_dir / "test.txt")])
        assert rc == 3

    def test_checkpoint_task_mismatch(self, run_dir, tmp_path):
        rc = main(["gen-data", "coloring", "--n", "5", "--count", "8", "--seed", "2",
                   "--out", str(tmp_path / "col")])
        assert rc == 0
        rc = main(["eval", "--ckpt", str(run_dir / "ckpt_final.bin"),
                   "--data", str(tmp_path / "col" / "test.txt"), "--width", "1"])
        assert rc in (2, 3)


class TestReproducibility:
    def test_same_seed_same_metrics(self, tmp_path, data_dir):
        outs = []
        for name in ("a", "b"):
            cfg = write_cfg(tmp_path, data_dir, name=f"{name}.ini", epochs=1, seed=3,
                            eval_every=3)
            out = tmp_path / name
            rc = main(["train", "--config", str(cfg), "--out", str(out)])
            assert rc == 0
            outs.append((out / "metrics.jsonl").read_text())
        assert outs[0] == outs[1]

    def test_guidance_none_kl_series_zero(self, tmp_path, data_dir):
        cfg = write_cfg(tmp_path, data_dir, name="det.ini", guidance="none", epochs=1)
        out = tmp_path / "det_run"
        rc = main(["train", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        for line in (out / "metrics.jsonl").read_text().splitlines():
            rec = json.loads(line)
            if rec["kind"] == "train":
                assert rec["kl_raw"] == 0.0
