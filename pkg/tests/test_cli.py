import json
import subprocess
import sys

import pytest

from logits_replay.cli import (
    EXIT_CONFIG,
    EXIT_FINGERPRINT,
    EXIT_MISSING_FILE,
    EXIT_OK,
    EXIT_USAGE,
    RunConfig,
    main,
)
from logits_replay.model import load_checkpoint

SMALL = {"n_pretrain_a": 40, "n_pretrain_b": 120, "n_finetune_a": 40, "n_val": 30,
         "pretrain_epochs": 1, "finetune_epochs": 1, "seed": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["--config", str(cfg)]
    assert main(["gen-data", *c, "--out", str(root / "data")]) == EXIT_OK
    assert main(["pretrain", *c, "--data", str(root / "data"), "--out", str(root / "base")]) == EXIT_OK
    ckpt = str(root / "base" / "checkpoint.bin")
    replay = str(root / "base" / "replay.jsonl")
    assert main(["collect", *c, "--checkpoint", ckpt, "--out", replay]) == EXIT_OK
    return root, c, ckpt, replay


def test_gen_data_files(workspace):
    root, *_ = workspace
    for name in ("pretrain", "finetune_a", "val_a", "val_b"):
        assert (root / "data" / f"{name}.txt").is_file()
    lines = (root / "data" / "pretrain.txt").read_text().splitlines()
    assert len(lines) == 160


def test_train_outputs_and_determinism(workspace):
    root, c, ckpt, replay = workspace
    for run in ("r1", "r2"):
        assert main(["train", *c, "--checkpoint", ckpt, "--replay", replay, "--out", str(root / run)]) == EXIT_OK
    a = (root / "r1" / "summary.json").read_bytes()
    assert a == (root / "r2" / "summary.json").read_bytes()
    s = json.loads(a)
    assert s["run"] == "moclip_replay" and s["r_ratio"] < 1.0
    assert "wall_seconds" not in a.decode() and "wall_seconds" in (root / "r1" / "timing.json").read_text()
    assert load_checkpoint(root / "r1" / "checkpoint.bin").config.vocab_size == 64


def test_config_echo_round_trips(workspace):
    root, _, ckpt, replay = workspace
    echo = root / "r1" / "config.echo"
    out = root / "r_echo"
    assert main(["train", "--config", str(echo), "--checkpoint", ckpt, "--replay", replay, "--out", str(out)]) == 0
    assert (out / "config.echo").read_bytes() == echo.read_bytes()
    assert (out / "summary.json").read_bytes() == (root / "r1" / "summary.json").read_bytes()
    cfg = RunConfig.from_dict(json.loads(echo.read_text()))
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_full_sft_and_report(workspace, capsys):
    root, c, ckpt, _ = workspace
    assert main(["train", *c, "--checkpoint", ckpt, "--optimizer", "adamw", "--out", str(root / "sft")]) == 0
    capsys.readouterr()
    assert main(["report", str(root / "r1"), str(root / "sft"), "--out", str(root / "report")]) == 0
    md = capsys.readouterr().out
    assert "| moclip_replay |" in md and "| adamw_sft |" in md
    rows = (root / "report" / "report.csv").read_text().splitlines()
    assert rows[0].startswith("run,seed,") and len(rows) == 3


def test_fingerprint_mismatch_exit_code(workspace, tmp_path):
    root, c, _, replay = workspace
    other = root / "r1" / "checkpoint.bin"
    args = ["train", *c, "--checkpoint", str(other), "--replay", replay, "--out", str(tmp_path / "x")]
    assert main(args) == EXIT_FINGERPRINT
    assert main([*args, "--override-fingerprint"]) == EXIT_OK


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_val": 10, "learning_rate": 0.1}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    bad.write_text('{"selector": {"tau": 1.5}}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    bad.write_text('{"optimizer": "sgd"}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == EXIT_MISSING_FILE


def test_missing_checkpoint(tmp_path):
    assert main(["train", "--checkpoint", str(tmp_path / "none.bin"), "--out", str(tmp_path)]) == EXIT_MISSING_FILE


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == EXIT_USAGE


def test_verify_subprocess(tmp_path):
    out = tmp_path / "verify.json"
    proc = subprocess.run([sys.executable, "-m", "logits_replay", "verify", "--trials", "300", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "all checks passed" in proc.stdout
    assert json.loads(out.read_text())["ok"] is True


def test_strategy_override(workspace, tmp_path):
    root, c, ckpt, _ = workspace
    out = tmp_path / "last.jsonl"
    assert main(["collect", *c, "--checkpoint", ckpt, "--strategy", "last", "--out", str(out)]) == EXIT_OK
    echo = json.loads((tmp_path / "config.echo").read_text())
    assert echo["strategy"]["kind"] == "last_token"
    stats = json.loads((tmp_path / "last.stats.json").read_text())
    assert stats["stats"]["record_count"] == 40
