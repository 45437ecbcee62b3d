import filecmp

import numpy as np
import pytest

from blindnet import cli
from blindnet.checkpoint import Checkpoint
from blindnet.data import write_ppm

TINY = ["--set", "base_channels=4", "--set", "res_blocks=1", "--set", "bottom_codes=16", "--set", "bottom_dim=4",
        "--set", "top_codes=8", "--set", "top_dim=4", "--set", "batch_size=4", "--set", "corpus_count=40",
        "--set", "checkpoint_every=2"]
POSE = ["--set", "pose_train_views=48", "--set", "pose_test_views=12", "--set", "pose_epochs=3",
        "--set", "pose_hidden=8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_gen_data_deterministic(tmp_path):
    assert run("gen-data", "--seed", 7, "--count", 10, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--seed", 7, "--count", 10, "--out", tmp_path / "b") == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    assert len((tmp_path / "a" / "manifest.txt").read_text().splitlines()) == 10


def test_gen_data_empty_and_bad_size(tmp_path, caplog):
    assert run("gen-data", "--count", 0, "--out", tmp_path / "e") == 0
    assert (tmp_path / "e" / "manifest.txt").read_text() == ""
    assert "empty corpus" in caplog.text
    assert run("gen-data", "--size", 50, "--out", tmp_path / "x") == 2
    assert "divisible by 8" in caplog.text


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data"])
    assert e.value.code == 1
    assert run("train-blind", "--out", tmp_path, "--set", "oops") == 1
    assert run("eval-recon", "--model", "nolabel", "--out", tmp_path) == 1


def test_validation_errors(tmp_path, monkeypatch):
    assert run("train-blind", "--out", tmp_path, "--set", "image_size=20") == 2
    monkeypatch.setenv("BLINDNET_GAMMA_O", "-2")
    assert run("train-blind", "--out", tmp_path, *TINY, "--steps", 1) == 2
    monkeypatch.delenv("BLINDNET_GAMMA_O")
    (tmp_path / "junk.ck").write_bytes(b"junk")
    assert run("decode", "--checkpoint", tmp_path / "junk.ck", "--out", tmp_path / "d") == 2


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, caplog):
    assert run("train-blind", "--out", tmp_path, *TINY, "--set", "lr=1e30", "--steps", 5) == 3
    assert "diverged at step" in caplog.text


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert run("train-blind", "--out", root / "b", *TINY, "--steps", 4) == 0
    assert run("train-nonblind", "--out", root / "n", *TINY, "--steps", 4) == 0
    return root


def test_smoke_train_log_and_checkpoint(trained):
    rows = (trained / "b" / "train_log.csv").read_text().splitlines()
    assert rows[0] == "step,l_q,l_r,l_l,l_o,total,lr" and len(rows) == 5
    ck = Checkpoint.load(trained / "b" / "final.ck")
    assert ck.meta["tag"] == "final" and int(ck["train/step"]) == 4
    assert (trained / "b" / "step_000002.ck").exists()


def test_nonblind_config_recorded(trained):
    text = (trained / "n" / "config.txt").read_text()
    assert "blind = false" in text and "omega = 0.0" in text
    b = (trained / "b" / "train_log.csv").read_text().splitlines()[1].split(",")
    n = (trained / "n" / "train_log.csv").read_text().splitlines()[1].split(",")
    assert b[1] == n[1]  # same initial commitment loss from the shared initialisation


def test_resume_matches_uninterrupted(trained, tmp_path):
    assert run("train-blind", "--out", tmp_path, "--resume", trained / "b" / "step_000002.ck") == 0
    assert (tmp_path / "final.ck").read_bytes() == (trained / "b" / "final.ck").read_bytes()
    assert run("train-blind", "--out", tmp_path / "x", "--resume", trained / "b" / "step_000002.ck",
               "--set", "omega=3") == 2


def test_pose_pipeline(trained, tmp_path):
    b, n = trained / "b" / "final.ck", trained / "n" / "final.ck"
    before = Checkpoint.load(b).to_bytes()
    assert run("train-pose", "--encoder", b, "--out", tmp_path / "pb", "--blind", *POSE) == 0
    assert run("train-pose", "--encoder", n, "--out", tmp_path / "pn", "--nonblind", *POSE) == 0
    assert Checkpoint.load(b).to_bytes() == before
    assert run("eval-pose", "--model", f"blind={b},{tmp_path / 'pb' / 'head.ck'}",
               "--model", f"nonblind={n},{tmp_path / 'pn' / 'head.ck'}", "--out", tmp_path / "ev") == 0
    rows = (tmp_path / "ev" / "summary.csv").read_text().splitlines()
    assert rows[0].startswith("model,seen_m") and [r.split(",")[0] for r in rows[1:]] == ["blind", "nonblind"]
    assert run("eval-pose", "--model", f"x={n},{tmp_path / 'pb' / 'head.ck'}", "--out", tmp_path / "bad") == 2
    (tmp_path / "empty.txt").write_text("")
    assert run("eval-pose", "--model", f"blind={b},{tmp_path / 'pb' / 'head.ck'}",
               "--trajectory", tmp_path / "empty.txt", "--out", tmp_path / "e") == 2


def test_eval_recon_and_decode(trained, tmp_path, caplog):
    b = trained / "b" / "final.ck"
    assert run("eval-recon", "--model", f"blind={b}", "--count", 6, "--out", tmp_path / "r") == 0
    lines = (tmp_path / "r" / "recon.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[2].startswith("blind,masked,6,")
    img = np.random.default_rng(0).integers(0, 256, (48, 48, 3), dtype=np.uint8)
    write_ppm(tmp_path / "clean.ppm", img)
    assert run("decode", "--checkpoint", b, "--images", tmp_path / "clean.ppm", "--out", tmp_path / "d") == 0
    assert "empty mask" in caplog.text
    assert (tmp_path / "d" / "triptych_0000.ppm").exists()
    write_ppm(tmp_path / "small.ppm", img[:16, :16])
    assert run("decode", "--checkpoint", b, "--images", tmp_path / "small.ppm", "--out", tmp_path / "d2") == 2


def test_plot(trained, tmp_path):
    pytest.importorskip("matplotlib")
    assert run("plot", "--log", trained / "b" / "train_log.csv", "--out", tmp_path / "p.png") == 0
    assert (tmp_path / "p.png").read_bytes()[:4] == b"\x89PNG"
    assert run("plot", "--log", trained / "b" / "train_log.csv", "--columns", "nope", "--out", tmp_path / "q.png") == 2
