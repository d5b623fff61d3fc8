import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from simamnet.cli import build_parser, main
from simamnet.config import ConfigError, RunConfig, dump_config, load_config, parse_config

REPO = Path(__file__).resolve().parents[1]

TINY = """\
seed: 3
data:
  synth_n: 12
  synth_size: 32
  val_fraction: 0.25
model:
  width_mult: 0.125
  blocks_per_stage: [1, 1, 1, 1]
train:
  epochs: 1
  batch_size: 4
bench:
  models: [resnet_simam, mlp]
  features: [raw, histogram]
  cnn_epochs: 1
  mlp_epochs: 3
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


# -- config ------------------------------------------------------------------

def test_defaults_follow_components():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.train.epochs == 500 and cfg.model.width_mult == 1.0
    assert cfg.resnet_config().input_channels == 2


@pytest.mark.parametrize("name", ["default.yaml", "smoke.yaml", "bench.yaml"])
def test_shipped_configs_round_trip(name):
    cfg = load_config(REPO / "configs" / name)
    text = dump_config(cfg)
    assert dump_config(parse_config(text)) == text
    assert parse_config(text) == cfg


def test_annotated_example_lists_every_key():
    assert load_config(REPO / "configs" / "default.yaml") == RunConfig()
    text = (REPO / "configs" / "default.yaml").read_text()
    for line in dump_config(RunConfig()).splitlines():
        key = line.strip().split(":")[0]
        if key and not key.startswith("-"):
            assert f"{key}:" in text


@pytest.mark.parametrize("text, fragment", [
    ("train:\n  epochz: 3\n", "train.epochz"),
    ("seed: 1\nmodel:\n  width_mult: wide\n", "line 3"),
    ("model:\n  stem: huge\n", "model.stem"),
    ("train: 5\n", "train"),
    ("data:\n  val_fraction: 1.5\n", "val_fraction"),
    ("seed: [1\n", "malformed"),
    ("seed: 1\nseed: 2\n", "duplicate"),
    ("train:\n  epochs: 2.5\n", "train.epochs"),
    ("augment:\n  enabled: 1\n", "augment.enabled"),
])
def test_config_errors_name_the_problem(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_keep_rgb_switches_input_channels():
    assert parse_config("data:\n  keep_rgb: true\n").resnet_config().input_channels == 6


# -- parser ------------------------------------------------------------------

def test_help_lists_commands_and_flags(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    out = capsys.readouterr().out
    for cmd in ("synth", "train", "eval", "bench", "features", "augment-preview", "verify",
                "config", "--threads"):
        assert cmd in out


# -- commands ----------------------------------------------------------------

def test_synth_counts_and_determinism(tmp_path, capsys):
    assert main(["synth", "--n", "30", "--seed", "2", "--out", str(tmp_path / "a")]) == 0
    assert "better" in capsys.readouterr().out
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 61
    assert len((tmp_path / "a" / "manifest.tsv").read_text().splitlines()) == 30
    assert main(["synth", "--n", "30", "--seed", "2", "--out", str(tmp_path / "b")]) == 0
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_missing_parent_exits_2(tmp_path, capsys):
    assert main(["synth", "--n", "3", "--out", str(tmp_path / "no" / "such")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_train_eval_and_determinism(tmp_path, tiny_cfg, capsys):
    outs = []
    for run in ("r1", "r2"):
        assert main(["--threads", "1", "train", "-c", str(tiny_cfg), "--out",
                     str(tmp_path / run)]) == 0
        outs.append(tmp_path / run)
    assert "macro_f1" in capsys.readouterr().out
    for name in ("model.ckpt", "curves.csv", "curves.svg", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    report = json.loads((outs[0] / "report.json").read_text())
    assert 0 <= report["macro_f1"] <= 1 and report["n_val"] == 3
    assert main(["eval", "-c", str(tiny_cfg), "--checkpoint", str(outs[0] / "model.ckpt"),
                 "--report", str(tmp_path / "eval.json")]) == 0
    again = json.loads((tmp_path / "eval.json").read_text())
    assert again["macro_f1"] == report["macro_f1"]


def test_train_unknown_key_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochz: 3\n")
    assert main(["train", "-c", str(bad)]) == 3
    assert "epochz" in capsys.readouterr().err


def test_train_bad_manifest_exits_4(tmp_path, capsys):
    manifest = tmp_path / "m.tsv"
    manifest.write_text("a\tx.pgm\ty.pgm\timproving\n")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"data:\n  manifest: {manifest}\n")
    assert main(["train", "-c", str(cfg)]) == 4


def test_missing_config_file_exits_2(tmp_path):
    assert main(["train", "-c", str(tmp_path / "nope.yaml")]) == 2


def test_eval_on_manifest(tmp_path, tiny_cfg):
    assert main(["train", "-c", str(tiny_cfg), "--out", str(tmp_path / "run")]) == 0
    assert main(["synth", "--n", "6", "--size", "32", "--out", str(tmp_path / "data")]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--manifest",
                 str(tmp_path / "data" / "manifest.tsv"), "--report",
                 str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["n"] == 6


def test_bench_writes_grid(tmp_path, tiny_cfg, capsys):
    assert main(["bench", "-c", str(tiny_cfg), "--out", str(tmp_path / "b")]) == 0
    with open(tmp_path / "b" / "grid.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model", "raw", "histogram"]
    assert [r[0] for r in rows[1:]] == ["resnet_simam", "mlp"]
    assert "Caveat" in (tmp_path / "b" / "grid.txt").read_text()


def test_features_command(tmp_path, tiny_cfg):
    out = tmp_path / "hog.csv"
    assert main(["features", "-c", str(tiny_cfg), "--kind", "hog", "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 13 and len(rows[0]) == 2 * 324


def test_augment_preview(tmp_path, tiny_cfg):
    out = tmp_path / "prev"
    assert main(["augment-preview", "-c", str(tiny_cfg), "--count", "3", "--out", str(out)]) == 0
    assert len(list(out.glob("*.pgm"))) == 8


def test_config_dump_is_canonical(tmp_path, tiny_cfg, capsys):
    assert main(["config", "dump", "-c", str(tiny_cfg)]) == 0
    first = capsys.readouterr().out
    again = tmp_path / "again.yaml"
    again.write_text(first)
    assert main(["config", "dump", "-c", str(again)]) == 0
    assert capsys.readouterr().out == first


def test_verify_fault_injection_exits_1(capsys, monkeypatch):
    from simamnet import verify
    # only the check under test, to keep this fast
    monkeypatch.setattr(verify, "CHECKS", [("simam fixed point", verify.check_simam_fixed_point)])
    assert main(["verify", "--inject-fault", "simam-lambda0"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "simam" in out
    assert main(["verify"]) == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "simamnet", "synth", "--n", "3", "--out",
                           str(tmp_path / "x" / "y")], capture_output=True, text=True)
    assert proc.returncode == 2
