import json

import pytest

from aepolab.cli import default_config, main, resolve
from aepolab.errors import ConfigError

SMALL = {"task": {"n_facts": 2, "n_options": 2, "n_keys": 3, "n_values": 3, "n_train": 30,
                  "n_eval": 6},
         "model": {"context_len": 32, "hidden_dim": 8, "n_layers": 1, "n_heads": 2},
         "sampling": {"max_response_len": 12},
         "train": {"total_steps": 2, "prompts_per_step": 2, "group_size": 3, "eval_every": 1},
         "warmup": {"steps": 2, "batch_size": 4, "min_parse_rate": 0.0}}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_defaults_cover_every_section():
    cfg = default_config()
    assert cfg["seed"] is None and cfg["train"]["total_steps"] is None
    assert cfg["clip"] == {"eps_low": 0.2, "eps_high": 0.28}


def test_unknown_and_mistyped_keys_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lrr": 1}}))
    assert main(["eval", "--config", str(bad), "--seed", "0", "--checkpoint", "x"]) == 1
    assert "train.lrr" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="reward.beta"):
        resolve(None, ["reward.beta=\"high\""])
    bad.write_text("{not json")
    assert main(["gen-tasks", "--config", str(bad), "--seed", "0", "--out", str(tmp_path)]) == 1


def test_usage_errors_exit_1(cfg_file, tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert main([]) == 1
    rc = main(["train", "--config", str(cfg_file), "--algorithm", "bogus", "--seed", "1",
               "--run-dir", str(tmp_path / "r")])
    assert rc == 1 and "aepo, grpo, dapo" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg_file), "--run-dir", str(tmp_path / "r")]) == 1


def test_runtime_failure_exit_2(cfg_file, tmp_path):
    assert main(["eval", "--config", str(cfg_file), "--seed", "0", "--checkpoint",
                 str(tmp_path / "missing.ckpt")]) == 2


def test_flags_equal_config_values_and_print_config_roundtrip(cfg_file, tmp_path, capsys):
    assert main(["train", "--config", str(cfg_file), "--seed", "7", "--algorithm", "grpo",
                 "--set", "clip.eps_low=0.1", "--run-dir", "x", "--print-config"]) == 0
    via_flags = json.loads(capsys.readouterr().out)
    merged = json.loads(json.dumps(SMALL))
    merged["seed"] = 7
    merged["train"]["algorithm"] = "grpo"
    merged["clip"] = {"eps_low": 0.1}
    (tmp_path / "m.json").write_text(json.dumps(merged))
    assert main(["train", "--config", str(tmp_path / "m.json"), "--run-dir", "x",
                 "--print-config"]) == 0
    assert json.loads(capsys.readouterr().out) == via_flags
    (tmp_path / "resolved.json").write_text(json.dumps(via_flags))
    assert main(["train", "--config", str(tmp_path / "resolved.json"), "--run-dir", "x",
                 "--print-config"]) == 0
    assert json.loads(capsys.readouterr().out) == via_flags


def test_end_to_end_commands(cfg_file, tmp_path, capsys):
    assert main(["gen-tasks", "--config", str(cfg_file), "--seed", "3",
                 "--out", str(tmp_path / "tasks")]) == 0
    assert len((tmp_path / "tasks" / "train.jsonl").read_text().splitlines()) == 30
    ck = tmp_path / "warm.ckpt"
    assert main(["warmup", "--config", str(cfg_file), "--seed", "3", "--out", str(ck)]) == 0
    runs = []
    for algo in ("aepo", "grpo"):
        run = tmp_path / algo
        assert main(["train", "--config", str(cfg_file), "--seed", "3", "--algorithm", algo,
                     "--init", str(ck), "--run-dir", str(run), "--workers", "2"]) == 0
        for f in ("config.json", "runlog.jsonl", "report.json", "checkpoints/final.ckpt"):
            assert (run / f).exists()
        runs.append(str(run))
    assert main(["eval", "--config", str(cfg_file), "--seed", "3", "--checkpoint",
                 str(tmp_path / "aepo" / "checkpoints" / "final.ckpt")]) == 0
    capsys.readouterr()
    assert main(["compare", "--runs", *runs, "--out", str(tmp_path / "report.json")]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert set(rep) == {"aepo", "grpo"}
    assert main(["export-curves", "--runs", *runs, "--out", str(tmp_path / "curves")]) == 0
    assert (tmp_path / "curves.csv").exists() and (tmp_path / "curves.svg").exists()
