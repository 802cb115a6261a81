import subprocess
import sys

import numpy as np
import pytest

from tivode import pgm
from tivode.cli import main
from tivode.config import RunConfig
from tivode.errors import FormatError, InputError
from tivode.metrics import parse_report
from tivode.shapes import PATTERNS, read_dataset

TINY = """\
# small enough to train in seconds
seed = 3
vq.codebook_size = 16
vq.code_dim = 4
vq.widths = 4, 8
vq.groups = 2
fusion.d_model = 16
fusion.n_blocks = 1
fusion.n_heads = 2
fusion.ff_width = 16
fusion.d_pos = 4
model.augment_channels = 2
model.ode_hidden = 8
model.ode_groups = 2
pretrain.epochs = 1
pretrain.batch_size = 16
train.steps = 2
train.batch_size = 2
"""


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["gen-data", "--out", str(root / "train"), "--samples", "6", "--size", "16", "--frames", "5"]) == 0
    assert main(["gen-data", "--out", str(root / "test"), "--samples", "4", "--size", "16", "--frames", "5",
                 "--split", "test", "--shapes", "2"]) == 0
    assert main(["pretrain-vqvae", "--config", str(root / "tiny.cfg"), "--data", str(root / "train"),
                 "--out", str(root / "vq")]) == 0
    assert main(["train", "--config", str(root / "tiny.cfg"), "--data", str(root / "train"),
                 "--out", str(root / "run"), "--vqvae", str(root / "vq" / "vqvae.tvc")]) == 0
    return root


def test_gen_data_deterministic(tmp_path, capsys):
    args = ["--samples", "3", "--size", "16", "--shapes", "2", "--seed", "5"]
    assert main(["gen-data", "--out", str(tmp_path / "a")] + args) == 0
    out = kv(capsys.readouterr().out)
    assert out["count"] == "3"
    assert main(["gen-data", "--out", str(tmp_path / "b")] + args) == 0
    for f in ("manifest.txt", "shard-0000.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("shapes", ["0", "4"])
def test_gen_data_rejects_shape_count(tmp_path, shapes):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--shapes", shapes]) == 2
    assert not (tmp_path / "d").exists()


def test_bad_arguments_exit_2(capsys):
    assert main(["train"]) == 2
    assert main(["no-such-command"]) == 2


def test_config_unknown_key_rejected(tmp_path):
    with pytest.raises(InputError):
        RunConfig.parse("train.lr = 1e-3\ntrain.learning_rate = 2\n")
    with pytest.raises(InputError):
        RunConfig.parse("train.steps = many\n")
    (tmp_path / "bad.cfg").write_text("vq.colour = red\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(tmp_path), "--out",
                 str(tmp_path / "o")]) == 2


def test_config_roundtrip_and_archive(work):
    cfg = RunConfig.parse(TINY)
    again = RunConfig.parse(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    assert cfg.vq_config().widths == (4, 8)
    archived = (work / "run" / "resolved_config.txt").read_text()
    assert "vq.code_dim = 4" in archived
    assert f"paths.vqvae = {work / 'vq' / 'vqvae.tvc'}" in archived


def test_missing_data_is_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


def test_generate_frames(work, tmp_path, capsys):
    sample = read_dataset(work / "train")[0]
    pgm.write(tmp_path / "x0.pgm", sample.frames[0])
    code = main(["generate", "--ckpt", str(work / "run" / "model.tvc"), "--image", str(tmp_path / "x0.pgm"),
                 "--caption", sample.caption, "--times", "fps:10", "--out-dir", str(tmp_path / "g")])
    assert code == 0
    files = sorted((tmp_path / "g").glob("frame_*.pgm"))
    assert len(files) == 11
    assert files[0].name == "frame_0.0000.pgm" and files[-1].name == "frame_1.0000.pgm"
    frame = pgm.read(files[3])
    assert frame.shape == (16, 16)
    assert pgm.to_bytes(frame) == files[3].read_bytes()
    run = kv((tmp_path / "g" / "run.txt").read_text())
    assert run["caption"] == sample.caption and len(run["checkpoint_sha256"]) == 64


def test_generate_rejects_unsorted_times(work, tmp_path):
    pgm.write(tmp_path / "x0.pgm", np.zeros((16, 16)))
    code = main(["generate", "--ckpt", str(work / "run" / "model.tvc"), "--image", str(tmp_path / "x0.pgm"),
                 "--caption", "the square stays still", "--times", "0.5,0.2", "--out-dir", str(tmp_path / "g")])
    assert code == 2


def test_generate_rejects_wrong_image_size(work, tmp_path):
    pgm.write(tmp_path / "x0.pgm", np.zeros((12, 16)))
    code = main(["generate", "--ckpt", str(work / "run" / "model.tvc"), "--image", str(tmp_path / "x0.pgm"),
                 "--caption", "the square stays still", "--out-dir", str(tmp_path / "g")])
    assert code == 2


def test_pgm_roundtrip_and_errors(tmp_path):
    img = np.round(np.random.default_rng(0).uniform(size=(5, 7)) * 255) / 255
    assert np.array_equal(pgm.from_bytes(pgm.to_bytes(img)), img)
    commented = b"P5\n# made by hand\n2 1\n# max\n65535\n\x00\x00\xff\xff"
    assert pgm.from_bytes(commented).tolist() == [[0.0, 1.0]]
    with pytest.raises(FormatError):
        pgm.from_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(FormatError):
        pgm.from_bytes(b"P2\n1 1\n255\n0")
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    assert main(["generate", "--ckpt", "x", "--image", str(tmp_path / "t.pgm"), "--caption", "a",
                 "--out-dir", str(tmp_path / "o")]) == 3


def test_evaluate_report(work, tmp_path):
    report = tmp_path / "r" / "report.txt"
    assert main(["evaluate", "--ckpt", str(work / "run" / "model.tvc"), "--data", str(work / "test"),
                 "--report", str(report)]) == 0
    vals = parse_report(report.read_text())
    assert vals["videos"] == 4 and vals["frames"] == 20
    for p in PATTERNS:
        assert f"ssim.{p.value}" in vals
    assert -1.0 <= vals["ssim"] <= 1.0


def test_pretrain_checkpoint_must_match_model(work, tmp_path):
    other = TINY.replace("vq.code_dim = 4", "vq.code_dim = 8")
    (tmp_path / "o.cfg").write_text(other)
    code = main(["train", "--config", str(tmp_path / "o.cfg"), "--data", str(work / "train"),
                 "--out", str(tmp_path / "o"), "--vqvae", str(work / "vq" / "vqvae.tvc")])
    assert code == 3
    code = main(["train", "--config", str(work / "tiny.cfg"), "--data", str(work / "train"),
                 "--out", str(tmp_path / "p"), "--vqvae", str(work / "run" / "model.tvc")])
    assert code == 3


def test_ablate_table(work, tmp_path, capsys):
    code = main(["ablate", "--config", str(work / "tiny.cfg"), "--data", str(work / "train"),
                 "--eval-data", str(work / "test"), "--out", str(tmp_path / "ab"),
                 "--vqvae", str(work / "vq" / "vqvae.tvc")])
    assert code == 0
    lines = (tmp_path / "ab" / "ablation.txt").read_text().splitlines()
    assert lines[0].split("\t") == ["model", "SSIM", "MSE"]
    assert [l.split("\t")[0] for l in lines[1:]] == ["TiV-TransAll", "TiV-TransNext", "TiV-ODE"]
    for l in lines[1:]:
        s, m = map(float, l.split("\t")[1:])
        assert -1 <= s <= 1 and m >= 0
    for sub in ("trans_all", "trans_next", "node"):
        assert (tmp_path / "ab" / sub / "model.tvc").exists()


def test_train_resume_equivalence(work, tmp_path, capsys):
    """A run stopped after one epoch and restarted ends where an uninterrupted run does."""
    cfg = TINY.replace("train.steps = 2", "train.steps = 6")
    (tmp_path / "c.cfg").write_text(cfg)
    args = ["--config", str(tmp_path / "c.cfg"), "--data", str(work / "train"),
            "--vqvae", str(work / "vq" / "vqvae.tvc")]
    assert main(["train", "--out", str(tmp_path / "full")] + args) == 0
    full = kv(capsys.readouterr().out)

    (tmp_path / "short.cfg").write_text(cfg.replace("train.steps = 6", "train.steps = 3"))
    short = ["--config", str(tmp_path / "short.cfg")] + args[2:]
    assert main(["train", "--out", str(tmp_path / "part")] + short) == 0
    (tmp_path / "part" / "model.tvc").unlink()
    capsys.readouterr()
    assert main(["train", "--out", str(tmp_path / "part")] + args) == 0
    resumed = kv(capsys.readouterr().out)
    assert resumed["steps"] == "6"
    assert resumed["final_loss"] == full["final_loss"]
    log_full = (tmp_path / "full" / "loss.log").read_text()
    assert (tmp_path / "part" / "loss.log").read_text() == log_full


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "tivode", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "pretrain-vqvae", "train", "generate", "evaluate", "ablate"):
        assert cmd in r.stdout
