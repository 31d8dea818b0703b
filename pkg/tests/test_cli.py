import json
import subprocess
import sys

import numpy as np
import pytest

from ecpenet.checkpoint import load_checkpoint, save_checkpoint
from ecpenet.cli import main
from ecpenet.data import read_image, to_uint8, write_image

TINY = ["--set", "network.channels=8", "--set", "network.rir_blocks=1", "--set", "network.res_blocks_per_rir=1",
        "--set", "train.batch_size=1", "--set", "train.patch_size=16"]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("d") / "data"
    assert main(["synth", "--out", str(root), "--count", "3", "--size", "32", "--max-support", "7", "--seed", "7"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_data):
    out = tmp_path_factory.mktemp("t") / "run"
    assert main(["train", "--data", str(small_data), "--out", str(out), "--iters", "2", "--seed", "1"] + TINY) == 0
    return out


def test_synth_byte_identical(tmp_path):
    args = ["synth", "--count", "20", "--seed", "7", "--size", "32"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len(a) == 41 and a == b
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert all(abs(k["sum"] - 1) < 1e-12 for k in manifest["kernels"])
    assert all(abs(np.sum(k["values"]) - 1) < 1e-9 for k in manifest["kernels"])


def test_synth_delta_mode(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--count", "3", "--kernel", "delta", "--size", "16"]) == 0
    for i in range(3):
        sharp = (tmp_path / "d" / "sharp" / f"{i:04d}.png").read_bytes()
        assert sharp == (tmp_path / "d" / "blur" / f"{i:04d}.png").read_bytes()


def test_synth_from_sharp_dir(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    write_image(src / "x.png", np.random.default_rng(0).random((3, 24, 24)))
    assert main(["synth", "--out", str(tmp_path / "o"), "--sharp-dir", str(src), "--max-support", "5"]) == 0
    assert len(list((tmp_path / "o" / "blur").glob("*.png"))) == 1


def test_synth_refuses_nonempty_output(tmp_path, capsys):
    target = tmp_path / "busy"
    target.mkdir()
    (target / "keep.txt").write_text("x")
    assert main(["synth", "--out", str(target), "--count", "1", "--size", "16"]) == 2
    assert (target / "keep.txt").read_text() == "x"
    assert "already exists" in capsys.readouterr().err


def test_train_outputs(trained):
    assert sorted(p.name for p in trained.iterdir()) == ["config.ini", "final.ecpn", "train.log"]
    ckpt = load_checkpoint(trained / "final.ecpn")
    assert ckpt.iteration == 2
    assert any(".ecpel." in n for n in ckpt.params)
    assert len((trained / "train.log").read_text().splitlines()) == 2


def test_train_ecp_off(tmp_path, small_data):
    out = tmp_path / "off"
    assert main(["train", "--data", str(small_data), "--out", str(out), "--iters", "1", "--ecp", "off"] + TINY) == 0
    ckpt = load_checkpoint(out / "final.ecpn")
    assert not any(".ecpel." in n for n in ckpt.params)
    assert ckpt.config["train"]["lam"] == 0.1 and ckpt.config["network"]["ecp"] is False
    record = json.loads((out / "train.log").read_text().splitlines()[0])
    assert record["dark"] == [] and record["total"] == pytest.approx(sum(record["recon"]), abs=1e-6)


def test_train_config_file(tmp_path, small_data):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[network]\nchannels = 8\nrir_blocks = 1\nres_blocks_per_rir = 1\nscales = 2\nwindows = 5, 3\n"
                   f"[train]\niterations = 1\nbatch_size = 1\n[loss]\nlambda = 0.2\n[data]\npath = {small_data}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    ckpt = load_checkpoint(tmp_path / "r" / "final.ecpn")
    assert ckpt.config["train"]["lam"] == 0.2 and ckpt.config["network"]["scales"] == 2


def test_train_bad_config_reports_line(tmp_path, capsys, small_data):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nlr = 1e-4\nnonsense line\n")
    assert main(["train", "--config", str(cfg), "--data", str(small_data), "--out", str(tmp_path / "x")]) == 1
    assert ":3:" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_usage_and_data_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["stats", str(tmp_path), "--window", "4"])
    assert exc.value.code == 1
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert main(["infer", "--checkpoint", str(tmp_path / "no.ecpn"), "--input", "x.png", "--out", "y.png"]) == 2
    assert main(["train", "--out", str(tmp_path / "o")]) == 1
    capsys.readouterr()


def test_infer_zero_residual_and_determinism(tmp_path, trained):
    ckpt = load_checkpoint(trained / "final.ecpn")
    for name in ckpt.params:
        if ".out." in name:
            ckpt.params[name][...] = 0
    save_checkpoint(ckpt, tmp_path / "zero.ecpn")
    img = to_uint8(np.random.default_rng(3).random((3, 30, 33))) / 255.0
    write_image(tmp_path / "in.png", img)
    assert main(["infer", "--checkpoint", str(tmp_path / "zero.ecpn"), "--input", str(tmp_path / "in.png"), "--out", str(tmp_path / "o.png")]) == 0
    np.testing.assert_array_equal(read_image(tmp_path / "o.png"), img[:, :28, :32])

    run = ["infer", "--checkpoint", str(trained / "final.ecpn"), "--input", str(tmp_path / "in.png")]
    assert main(run + ["--out", str(tmp_path / "a.png")]) == 0
    assert main(run + ["--out", str(tmp_path / "b.png")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_gradcheck_case_filter(capsys):
    assert main(["gradcheck", "--case", "extractor"]) == 0
    out = capsys.readouterr().out
    assert "extractor.dark" in out and "extractor.bright" in out and "conv2d" not in out
    assert main(["gradcheck", "--case", "nope"]) == 1


def test_stats_outputs(tmp_path, capsys, small_data):
    write_image(tmp_path / "gray.png", np.full((3, 20, 20), 128 / 255))
    assert main(["stats", str(tmp_path / "gray.png"), "--window", "5"]) == 0
    out = capsys.readouterr().out
    assert "0.5020" in out.splitlines()[1]
    assert main(["stats", str(small_data), "--pairs"]) == 0
    assert "pairs where blur" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ecpenet", "gradcheck", "--case", "concat"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "overall: PASS" in proc.stdout
