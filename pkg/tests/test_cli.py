import json
import subprocess
import sys

import numpy as np
import pytest

from cavl.cli import RunConfig, load_run_config, run_cli
from cavl.errors import ConfigError
from cavl.evaluation import read_heatmap_csv, read_metrics, read_pgm
from cavl.training import load_checkpoint

TINY = {
    "model": {"vocab_size": 200, "hidden": 16, "layers": 1, "heads": 2, "ffn_dim": 32,
              "max_text_len": 16, "max_rois": 8, "roi_feature_dim": 8},
    "data": {"train_samples": 48, "test_samples": 16, "finetune_samples": 32,
             "corpus": {"vocab_size": 200, "roi_feature_dim": 8, "half_len": 3,
                        "template_size": 6, "n_styles": 2, "n_attributes": 4,
                        "min_rois": 2, "max_rois": 4}},
    "train": {"epochs": 2, "batch_size": 16},
    "finetune": {"mode": "adapter2", "train": {"epochs": 1, "batch_size": 8, "bottleneck": 4}},
    "eval_candidates": 16,
    "heatmap_n": 8,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def pretrained(tmp_path, config):
    out = tmp_path / "pt"
    assert run_cli(["pretrain", "--config", str(config), "--seed", "7", "--out", str(out)]) == 0
    return out


# ------------------------------------------------------------------ usage errors

def test_unknown_subcommand_exits_1(capsys):
    assert run_cli(["train-everything"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_exits_1(capsys):
    assert run_cli([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"hidden": 16, "colour": "blue"}}))
    assert run_cli(["pretrain", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "colour" in capsys.readouterr().err


def test_runtime_error_exits_2(tmp_path, pretrained, config, capsys):
    code = run_cli(["heatmap", "--config", str(config), "--checkpoint",
                    str(pretrained / "checkpoint.bin"), "--n", "999", "--out", str(tmp_path)])
    assert code == 2
    assert "SplitTooSmall" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(tmp_path, config):
    assert run_cli(["eval", "--config", str(config), "--checkpoint",
                    str(tmp_path / "nope.bin")]) == 2


def test_run_too_short_for_a_warmup_exits_1(tmp_path, config):
    # 3 steps in total round the 15% warm-up down to zero steps
    assert run_cli(["pretrain", "--config", str(config), "--epochs", "1",
                    "--out", str(tmp_path / "short")]) == 1


def test_unknown_gradcheck_op_exits_1():
    assert run_cli(["gradcheck", "--ops", "frobnicate"]) == 1


# ------------------------------------------------------------------ config

def test_config_precedence(config):
    cfg = load_run_config(str(config))
    assert cfg.model.hidden == 16 and cfg.train.epochs == 2
    assert cfg.train.base_lr == RunConfig().train.base_lr
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": 1, "extra": True})


def test_flags_override_file(tmp_path, config):
    out = tmp_path / "o"
    assert run_cli(["pretrain", "--config", str(config), "--epochs", "3", "--w-pwcl", "0",
                    "--out", str(out)]) == 0
    ck = load_checkpoint(out / "checkpoint.bin")
    assert ck.config["train"]["epochs"] == 3
    assert ck.config["train"]["weights"]["pwcl"] == 0.0
    saved = json.loads((out / "config.json").read_text())
    assert saved["train"]["epochs"] == 3 and saved["model"]["hidden"] == 16


# ------------------------------------------------------------------ subcommands

def test_pretrain_outputs_and_metrics(pretrained):
    for name in ("checkpoint.bin", "metrics.jsonl", "config.json", "run.log"):
        assert (pretrained / name).exists()
    recs = read_metrics(pretrained / "metrics.jsonl")
    steps = [r for r in recs if r["kind"] == "step"]
    evals = [r for r in recs if r["kind"] == "eval"]
    assert len(steps) == 2 * (48 // 16) and len(evals) == 2
    assert len(recs) == len(steps) + len(evals)
    for line in (pretrained / "metrics.jsonl").read_text().splitlines():
        keys = list(json.loads(line))
        assert keys == sorted(keys)
    assert {frozenset(r) for r in steps} == {frozenset(steps[0])}
    assert all(not any(k.startswith("recall@") for k in r) for r in recs)
    assert load_checkpoint(pretrained / "checkpoint.bin").seed == 7


def test_pretrain_is_byte_reproducible(tmp_path, config, pretrained):
    again = tmp_path / "again"
    assert run_cli(["pretrain", "--config", str(config), "--seed", "7", "--out", str(again)]) == 0
    for name in ("checkpoint.bin", "metrics.jsonl", "config.json"):
        if name == "config.json":
            a = json.loads((pretrained / name).read_text())
            b = json.loads((again / name).read_text())
            a.pop("output_dir"), b.pop("output_dir")
            assert a == b
        else:
            assert (pretrained / name).read_bytes() == (again / name).read_bytes()


def test_other_seed_changes_checkpoint(tmp_path, config, pretrained):
    other = tmp_path / "other"
    assert run_cli(["pretrain", "--config", str(config), "--seed", "8", "--out", str(other)]) == 0
    assert (other / "checkpoint.bin").read_bytes() != (pretrained / "checkpoint.bin").read_bytes()


def test_gen_data_then_pretrain_from_files(tmp_path, config):
    data = tmp_path / "data"
    assert run_cli(["gen-data", "--config", str(config), "--seed", "3", "--out", str(data)]) == 0
    for split in ("train", "test", "finetune"):
        assert (data / f"{split}.jsonl").exists() and (data / f"{split}.rois").exists()
    n = len((data / "train.jsonl").read_text().splitlines())
    assert n == 48
    out = tmp_path / "from_files"
    assert run_cli(["pretrain", "--config", str(config), "--data", str(data),
                    "--out", str(out)]) == 0


def test_finetune_writes_partition_report(tmp_path, config, pretrained):
    out = tmp_path / "ft"
    assert run_cli(["finetune", "--config", str(config), "--checkpoint",
                    str(pretrained / "checkpoint.bin"), "--out", str(out)]) == 0
    rep = json.loads((out / "partition.json").read_text())
    assert rep["mode"] == "adapter2"
    brute = {True: 0, False: 0}
    for e in rep["per_tensor"]:
        brute[e["trainable"]] += int(np.prod(e["shape"]))
    assert (rep["trainable"], rep["frozen"]) == (brute[True], brute[False])
    recs = read_metrics(out / "metrics.jsonl")
    steps = [r for r in recs if r["kind"] == "step"]
    evals = [r for r in recs if r["kind"] == "eval"]
    assert len(steps) == 32 // 8 and len(evals) == 1
    assert all({"task_loss", "task_acc", "lr", "step", "epoch"} <= set(r) for r in steps)
    assert all("recall@1" in r for r in evals)
    assert all("recall@1" not in r for r in steps)


def test_eval_zero_shot(tmp_path, config, pretrained, capsys):
    out = tmp_path / "ev"
    assert run_cli(["eval", "--config", str(config), "--checkpoint",
                    str(pretrained / "checkpoint.bin"), "--zero-shot", "--out", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    saved = json.loads((out / "eval.json").read_text())
    assert printed == saved
    assert saved["scoring"] == "zero-shot" and saved["candidates"] == 16
    assert {"recall@1", "recall@5", "recall@10"} <= set(saved)


def test_heatmap_subcommand(tmp_path, config, pretrained):
    out = tmp_path / "hm"
    assert run_cli(["heatmap", "--config", str(config), "--checkpoint",
                    str(pretrained / "checkpoint.bin"), "--n", "6", "--out", str(out)]) == 0
    S = read_heatmap_csv(out / "heatmap.csv")
    assert S.shape == (6, 6)
    assert (out / "heatmap.pgm").read_bytes().startswith(b"P5\n6 6\n255\n")
    assert read_pgm(out / "heatmap.pgm").shape == (6, 6)


def test_gradcheck_subset(capsys):
    assert run_cli(["gradcheck", "--ops", "softmax,layer_norm"]) == 0
    table = capsys.readouterr().out
    assert "softmax" in table and "layer_norm" in table and "FAIL" not in table


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cavl", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert "pretrain" in proc.stdout and "gradcheck" in proc.stdout
