import subprocess
import sys

import numpy as np
import pytest

from fdnm import config as cfgmod
from fdnm.cli import main
from fdnm.data import load_image, save_image
from fdnm.numerics.params import read_checkpoint, write_checkpoint
from fdnm.training import build_model

TINY = """\
epochs = 2
warmup_epochs = 1
milestones = 1
decay_lrs = 0.01
eval_every = 1
checkpoint_every = 1
channels = 8, 8
strides = 2, 1
agp_after = 1
batch_p = 2
batch_k = 2
synth_num_identities = 3
synth_images_per_identity = 4
synth_test_images = 2
synth_height = 16
synth_width = 8
"""


@pytest.fixture
def image(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(3, 12, 10)) / 255.0
    path = tmp_path / "a.ppm"
    save_image(img, path)
    return img, path


def test_decompose_recompose_round_trip(tmp_path, image, capsys):
    img, path = image
    assert main(["decompose", str(path), "--out", str(tmp_path / "dec")]) == 0
    for c in range(3):
        for stem in ("amp", "pha"):
            assert (tmp_path / "dec" / f"{stem}_c{c}.f32").exists()
            assert (tmp_path / "dec" / f"{stem}_c{c}.pgm").exists()
    planes = read_checkpoint(tmp_path / "dec" / "amp_c0.f32")
    assert planes["amp_c0"].shape == (12, 10)
    assert main(["recompose", str(tmp_path / "dec"), "--out", str(tmp_path / "r.ppm")]) == 0
    assert np.max(np.abs(load_image(tmp_path / "r.ppm") - img)) <= 1 / 255 + 1e-6


def test_constant_image_has_single_dc_pixel(tmp_path):
    save_image(np.full((1, 6, 4), 0.5), tmp_path / "c.pgm")
    assert main(["decompose", str(tmp_path / "c.pgm"), "--out", str(tmp_path / "d")]) == 0
    vis = load_image(tmp_path / "d" / "amp_c0.pgm")[0]
    assert np.count_nonzero(vis) == 1 and vis[3, 2] == 1.0


def test_swap(tmp_path, image, capsys):
    img, path = image
    assert main(["swap", str(path), str(path), "--out", str(tmp_path / "s")]) == 0
    out = capsys.readouterr().out
    assert "clamped_total=0" in out
    for name in ("pha_a_amp_b", "pha_b_amp_a"):
        assert np.max(np.abs(load_image(tmp_path / "s" / f"{name}.ppm") - img)) <= 1 / 255 + 1e-9
    for name in ("phase_only_a", "amplitude_only_b"):
        assert (tmp_path / "s" / f"{name}.ppm").exists()


def test_swap_reports_clamping_and_size_errors(tmp_path, image, capsys):
    _, path = image
    rng = np.random.default_rng(1)
    save_image(rng.uniform(size=(3, 12, 10)), tmp_path / "b.ppm")
    assert main(["swap", str(path), str(tmp_path / "b.ppm"), "--out", str(tmp_path / "s")]) == 0
    lines = capsys.readouterr().out.splitlines()
    counts = [int(l.rsplit("=", 1)[1]) for l in lines if "clamped=" in l]
    assert lines[-1] == f"clamped_total={sum(counts)}"
    save_image(np.zeros((3, 4, 4)), tmp_path / "small.ppm")
    assert main(["swap", str(path), str(tmp_path / "small.ppm"), "--out", str(tmp_path / "x")]) == 1
    assert capsys.readouterr().err.startswith("error: CliError: image sizes differ")


def test_missing_file_is_one_line_error(tmp_path, capsys):
    assert main(["decompose", str(tmp_path / "nope.ppm"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: FileNotFoundError") and err.count("\n") == 1


def test_train_eval_and_config_echo(tmp_path, capsys):
    cfg = tmp_path / "tiny.txt"
    cfg.write_text(TINY)
    run = tmp_path / "run"
    assert main(["train", "--desk", "--config", str(cfg), "--out", str(run)]) == 0
    captured = capsys.readouterr()
    assert "seed 0" in captured.err and "rank1=" in captured.out
    for name in ("metrics.csv", "config.txt", "epoch_0002.fdnm", "summary.csv", "cmc.csv",
                 "dist_hist.csv"):
        assert (run / name).exists()
    assert len((run / "metrics.csv").read_text().splitlines()) == 3
    assert main(["eval", str(run / "epoch_0002.fdnm")]) == 0
    line = capsys.readouterr().out.strip()
    assert line == (run / "summary.csv").read_text().splitlines()[1]
    # a synth dump on disk evaluates like the in-memory split, up to 8-bit rounding
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    capsys.readouterr()
    assert main(["eval", str(run / "epoch_0002.fdnm"), "--data", str(tmp_path / "ds")]) == 0
    assert len(capsys.readouterr().out.strip().split(",")) == 5


def test_train_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "tiny.txt"
    cfg.write_text(TINY)
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    for f in ("metrics.csv", "epoch_0002.fdnm", "summary.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_untrained_model_is_near_chance(tmp_path, capsys):
    rank1 = []
    for seed in range(5):
        run = tmp_path / f"s{seed}"
        run.mkdir()
        assert main(["config", "--desk", "--seed", str(seed)]) == 0
        (run / "config.txt").write_text(capsys.readouterr().out)
        cfg = cfgmod.load(run / "config.txt")
        model = build_model(cfg.backbone, cfg.train, cfg.synth.num_identities)
        write_checkpoint(run / "init.fdnm", model.state_arrays())
        assert main(["eval", str(run / "init.fdnm")]) == 0
        rank1.append(float(capsys.readouterr().out.split(",")[0]))
    assert abs(np.mean(rank1) - 1 / 20) <= 0.1


def test_eval_without_config_fails(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "x.fdnm")]) == 1
    assert "config" in capsys.readouterr().err


def test_threads_env_validated(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FDNM_THREADS", "zero")
    assert main(["config"]) == 1
    assert "FDNM_THREADS" in capsys.readouterr().err


def test_console_script_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "fdnm.cli", "config"], capture_output=True, text=True)
    assert ok.returncode == 0 and "lambda2 = 0.5" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "fdnm.cli", "decompose", str(tmp_path / "no.ppm"),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert bad.returncode == 1 and bad.stderr.startswith("error:")


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "0 failed" in capsys.readouterr().out
