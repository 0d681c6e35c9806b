import json

import pytest

from s4d.backbone import load_checkpoint
from s4d.cli import main
from s4d.config import ConfigError, RunConfig, load, parse_lines, resolve

SMALL = ["--set", "synth.sfer_per_class=8", "--set", "synth.dfer_per_class=4", "--set", "synth.image_size=16",
         "--set", "synth.video_length=10", "--set", "model.dim=32", "--set", "model.depth=2",
         "--set", "model.moae_layers=1", "--set", "model.n_experts=4", "--set", "pretrain.steps=3",
         "--set", "finetune.epochs=1"]


def test_config_round_trip(tmp_path):
    cfg = resolve({"model.dim": "48", "finetune.betas": "0.8,0.9", "wall_clock": "true"})
    assert cfg.model.dim == 48 and cfg.finetune.betas == (0.8, 0.9) and cfg.wall_clock
    path = tmp_path / "c.txt"
    cfg.write(path)
    again = load(path)
    assert again.dump() == cfg.dump()


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError):
        resolve({"model.width": "3"})
    with pytest.raises(ConfigError):
        resolve({"model.dim": "abc"})
    with pytest.raises(ConfigError):
        resolve({"finetune.sfer_proportion": "1.5"})
    with pytest.raises(ConfigError):
        parse_lines("just words")


def test_seed_drives_every_stage():
    cfg = resolve({"seed": "9"})
    assert cfg.pretrain.seed == cfg.finetune.seed == 9
    assert "finetune.seed" not in dict(cfg.items())


def test_config_file_with_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nmodel.n_experts = 4\nfinetune.epochs = 3\n")
    cfg = load(path, {"finetune.epochs": "5"})
    assert cfg.model.n_experts == 4 and cfg.finetune.epochs == 5
    assert RunConfig().model.n_experts == 8


def test_full_pipeline(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["synth", "--out-dir", out, *SMALL]) == 0
    assert main(["pretrain", "--out-dir", out, *SMALL]) == 0
    assert main(["finetune", "--out-dir", out, "--moae-pos", "early", "--experts", "4", "--sfer-prop", "0.5",
                 *SMALL]) == 0
    assert main(["eval", "--out-dir", out, *SMALL]) == 0
    assert main(["analyze", "--out-dir", out, *SMALL]) == 0
    run = tmp_path / "run"
    for name in ("config.synth.txt", "config.finetune.txt", "metrics.pretrain.jsonl", "metrics.finetune.jsonl",
                 "pretrain.s4dc", "finetune.s4dc", "checkpoints/best.s4dc", "reports/eval.json",
                 "reports/confusion_sfer_on_dfer.csv", "reports/class_center_similarity.csv",
                 "reports/expert_usage.csv", "reports/attention.csv", "reports/analysis.json"):
        assert (run / name).exists(), name
    echo = (run / "config.finetune.txt").read_text()
    assert "model.moae_position = early" in echo and "finetune.sfer_proportion = 0.5" in echo
    _, meta = load_checkpoint(run / "finetune.s4dc")
    assert meta["model"]["moae_position"] == "early"
    report = json.loads((run / "reports" / "eval.json").read_text())
    assert set(report) == {"sfer_on_sfer", "dfer_on_dfer", "sfer_on_dfer", "dfer_on_sfer"}
    line = json.loads((run / "metrics.finetune.jsonl").read_text().splitlines()[0])
    assert line["stage"] == "finetune" and line["wall_ms"] == 0


def test_baseline_mtl_and_no_pretrain(tmp_path):
    out = str(tmp_path / "run")
    assert main(["synth", "--out-dir", out, *SMALL]) == 0
    assert main(["finetune", "--out-dir", out, *SMALL]) == 2  # no stage-1 checkpoint
    assert main(["finetune", "--out-dir", out, "--no-pretrain", "--baseline-mtl", *SMALL]) == 0
    params, meta = load_checkpoint(tmp_path / "run" / "finetune.s4dc")
    assert meta["model"]["moae_layers"] == 0
    assert not any(".moae." in k for k in params)
    assert json.loads((tmp_path / "run" / "finetune.json").read_text())["init"] == "random init"


def test_bad_flags(tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path), "--set", "nope=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["eval", "--out-dir", str(tmp_path / "empty")]) == 2
    with pytest.raises(SystemExit):
        main(["train"])


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("S4D_THREADS", "many")
    assert main(["synth", "--out-dir", str(tmp_path), *SMALL]) == 2


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS model_2layer" in out and "FAIL" not in out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"] is True
