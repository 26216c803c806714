import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from slice25d.cli import DEFAULTS, build_parser, main
from slice25d.data import load_volume


def checksums(folder):
    out = {}
    for name in sorted(os.listdir(folder)):
        with open(os.path.join(folder, name), "rb") as fh:
            out[name] = hashlib.sha256(fh.read()).hexdigest()
    return out


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """A tiny dataset and a short training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("toy")
    assert main(["gen-data", "--out", str(root / "data"), "--shape", "8", "--per-class", "8",
                 "--seed", "1", "--blob-size", "3"]) == 0
    manifest = str(root / "data" / "manifest.json")
    args = ["train", "--manifest", manifest, "--out", str(root / "run"), "--widths", "4,8",
            "--n-heads", "2", "--epochs", "40", "--lr", "0.003", "--batch-size", "4",
            "--freeze-epochs", "0", "--seeds", "0"]
    assert main(args) == 0
    return root, manifest, args


def test_gen_data_is_reproducible(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / d / "nested"), "--shape", "16",
                     "--per-class", "50", "--seed", "7"]) == 0
    a, b = checksums(tmp_path / "a" / "nested"), checksums(tmp_path / "b" / "nested")
    assert a == b and len(a) == 101
    assert capsys.readouterr().out.strip().endswith("manifest.json")


def test_gen_data_usage_errors(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--per-class", "0"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--shape", "4"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--per-class", "many"])
    assert exc.value.code == 2


def test_train_outputs(toy):
    root, _, _ = toy
    files = set(os.listdir(root / "run"))
    assert {"report_seed0.csv", "model_seed0.spm", "report.csv", "aggregate.json"} <= files
    summary = json.loads((root / "run" / "aggregate.json").read_text())
    assert summary["selection"] == "last_epoch" and summary["train"]["epochs"] == 40


def test_train_is_bitwise_reproducible(toy, tmp_path):
    root, manifest, args = toy
    again = list(args)
    again[again.index("--out") + 1] = str(tmp_path / "run")
    assert main(again) == 0
    assert checksums(root / "run") == checksums(tmp_path / "run")


def test_eval_on_train_split_of_overfit_run(toy, capsys):
    root, manifest, _ = toy
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(root / "run" / "model_seed0.spm"), "--manifest", manifest,
                 "--split", "train"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["acc"] == 1.0


def test_explain_attention_files(toy, tmp_path, capsys):
    root, manifest, _ = toy
    capsys.readouterr()
    prefix = str(tmp_path / "x" / "att")
    assert main(["explain", "--checkpoint", str(root / "run" / "model_seed0.spm"),
                 "--manifest", manifest, "--out", prefix]) == 0
    written = capsys.readouterr().out.split()
    assert sorted(os.path.basename(p) for p in written) == [
        "att.csv", "att.json", "att_axial.pgm", "att_coronal.pgm", "att_sagittal.pgm"]
    assert main(["explain", "--checkpoint", str(root / "run" / "model_seed0.spm"),
                 "--manifest", manifest, "--out", prefix, "--hirescam"]) == 2


def test_explain_hirescam_volume(toy, tmp_path):
    root, manifest, _ = toy
    out = tmp_path / "c3"
    assert main(["train", "--manifest", manifest, "--out", str(out), "--variant", "conv3d",
                 "--widths", "4,8", "--epochs", "1", "--freeze-epochs", "0", "--seeds", "0"]) == 0
    ckpt = str(out / "model_seed0.spm")
    assert main(["explain", "--checkpoint", ckpt, "--manifest", manifest,
                 "--out", str(tmp_path / "h"), "--hirescam"]) == 0
    vol = load_volume(str(tmp_path / "h_hirescam.rvf"))
    assert vol.data.shape == (1, 8, 8, 8) and np.isfinite(vol.data).all()
    assert main(["explain", "--checkpoint", ckpt, "--manifest", manifest,
                 "--out", str(tmp_path / "h")]) == 2


def test_missing_inputs_exit_2(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.spm"), "--manifest", "m.json"]) == 2
    assert main(["train"]) == 2


@pytest.mark.parametrize("variant,expected", [("conv3d", "33161026"), ("acs", "11171266"),
                                              ("slice2p5d", "12221890")])
def test_params(variant, expected, capsys):
    assert main(["params", "--variant", variant]) == 0
    out = capsys.readouterr().out
    assert out.startswith(expected)


def test_reductions_and_variants_accepted():
    parser = build_parser()
    for r in ("lstm", "average", "max", "transformer", "attention_pool"):
        assert parser.parse_args(["train", "--reduction", r]).reduction == r
    for v in ("conv3d", "acs", "slice2p5d"):
        assert parser.parse_args(["train", "--variant", v]).variant == v


def test_help_lists_defaults():
    out = subprocess.run([sys.executable, "-m", "slice25d", "train", "--help"],
                         capture_output=True, text=True, check=True).stdout
    flat = " ".join(out.split())
    for text in ("(default: 50)", "(default: 0.0002)", "(default: 64)", "(default: 2)",
                 "(default: 8)", "(default: 0,1,2,3,4)"):
        assert text in flat
    parser = build_parser()
    for cmd, sub in parser._subparsers._group_actions[0].choices.items():
        flags = {a.dest for a in sub._actions if a.option_strings} - {"help", "config"}
        assert flags == set(DEFAULTS[cmd])


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"variant": "acs"}))
    assert main(["params", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.startswith("11171266")
    assert main(["params", "--config", str(cfg), "--variant", "conv3d"]) == 0
    assert capsys.readouterr().out.startswith("33161026")
    cfg.write_text(json.dumps({"variant": "acs", "colour": "blue"}))
    assert main(["params", "--config", str(cfg)]) == 2
