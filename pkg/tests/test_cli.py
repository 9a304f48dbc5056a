"""Command-line interface: subcommands, exit codes, file outputs."""

import numpy as np
import pytest

from splat4d.cli import cli
from splat4d.imgio import read_imgf

SPEC_TEXT = """\
[scene]
seed = 11

[object]
preset = sphere-shell
gaussians = 24

[motion]
preset = rigid-translate
amplitude = 0.4
frames = 4

[cameras]
count = 3
radius = 4.0
elevation = 20.0

[images]
size = 32

[features]
dim = 4
size = 8
"""

TRAIN_TEXT = """\
[train]
iterations_rec = 4
iterations_sds = 2
batch = 4
seed = 0
hidden = 16
arap_k = 3

[hexplane]
spatial = 12
temporal = 4
dim = 4
levels = 2
"""


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "scene.cfg"
    spec.write_text(SPEC_TEXT)
    out = root / "ds"
    assert cli(["synth", "--spec", str(spec), "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_populates_directory(self, dataset_dir):
        assert (dataset_dir / "cam_0" / "frame_0.png").exists()
        assert (dataset_dir / "cameras.csv").exists()
        assert (dataset_dir / "canonical.bin").exists()

    def test_missing_spec_is_io_failure(self, tmp_path):
        assert cli(["synth", "--spec", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "d")]) == 2

    def test_invalid_spec_is_validation_failure(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[object]\npreset = dodecahedron\n")
        assert cli(["synth", "--spec", str(bad), "--out", str(tmp_path / "d")]) == 1

    def test_bad_usage_is_validation_failure(self):
        assert cli(["synth"]) == 1

    def test_byte_identical_across_runs(self, tmp_path):
        spec = tmp_path / "s.cfg"
        spec.write_text(SPEC_TEXT)
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli(["synth", "--spec", str(spec), "--out", str(a)]) == 0
        assert cli(["synth", "--spec", str(spec), "--out", str(b)]) == 0
        fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert fa == fb
        for rel in fa:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestTrack:
    def test_runs_and_writes_tracks(self, dataset_dir, capsys):
        out = dataset_dir.parent / "nn_tracks.txt"
        assert cli(["track", "--dataset", str(dataset_dir), "--out", str(out)]) == 0
        assert out.exists()
        text = capsys.readouterr().out
        assert "l_corr" in text and "l_pos" in text and "stage_one_objective" in text


@pytest.fixture(scope="module")
def checkpoint(dataset_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("ck")
    cfg = root / "train.cfg"
    cfg.write_text(TRAIN_TEXT)
    ck = root / "model.ck"
    log = root / "loss.csv"
    code = cli([
        "reconstruct", "--dataset", str(dataset_dir), "--out", str(ck),
        "--config", str(cfg), "--log", str(log),
    ])
    assert code == 0
    return ck, log


class TestReconstructRenderEval:
    def test_checkpoint_and_log_written(self, checkpoint):
        ck, log = checkpoint
        assert ck.stat().st_size > 0
        lines = log.read_text().splitlines()
        assert lines[0] == "step,phase,l_rec,l_sds,l_arap,total"
        assert len(lines) == 7  # 4 + 2 steps

    def test_render_outputs_images(self, checkpoint, dataset_dir, tmp_path):
        ck, _ = checkpoint
        out = tmp_path / "renders"
        code = cli([
            "render", "--checkpoint", str(ck), "--dataset", str(dataset_dir),
            "--view", "1", "--frame", "2", "--out", str(out),
        ])
        assert code == 0
        img = read_imgf(out / "render_v1_t2.imgf")
        assert img.shape == (32, 32, 3)
        assert (out / "render_v1_t2.png").exists()
        assert (out / "alpha_v1_t2.imgf").exists()
        assert (out / "depth_v1_t2.imgf").exists()

    def test_render_roundtrip_bit_identical(self, checkpoint, dataset_dir, tmp_path):
        """Checkpoint load -> render twice gives byte-identical images."""
        ck, _ = checkpoint
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert cli([
                "render", "--checkpoint", str(ck), "--dataset", str(dataset_dir),
                "--view", "0", "--frame", "1", "--out", str(out),
            ]) == 0
            outs.append((out / "render_v0_t1.imgf").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_report(self, checkpoint, dataset_dir, tmp_path, capsys):
        ck, _ = checkpoint
        report = tmp_path / "report.txt"
        code = cli([
            "eval", "--checkpoint", str(ck), "--dataset", str(dataset_dir),
            "--out", str(report),
        ])
        assert code == 0
        text = report.read_text()
        assert "masked_psnr" in text and "traj_err_pct" in text
        assert "track_drift" in text

    def test_missing_checkpoint_is_io_failure(self, dataset_dir, tmp_path):
        code = cli([
            "render", "--checkpoint", str(tmp_path / "no.ck"), "--dataset", str(dataset_dir),
            "--view", "0", "--frame", "0", "--out", str(tmp_path / "o"),
        ])
        assert code == 2


class TestSchedule:
    def test_writes_csv(self, tmp_path):
        out = tmp_path / "sched.csv"
        assert cli(["schedule", "--timesteps", "16", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t,beta_ddpm,alpha_bar,alpha,sigma,beta_cond"
        assert len(lines) == 18

    def test_invalid_range_is_validation_failure(self, tmp_path):
        assert cli(["schedule", "--beta-min", "0.0", "--out", str(tmp_path / "x.csv")]) == 1


class TestGradcheckCommand:
    def test_exits_zero(self, capsys):
        assert cli(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 6
