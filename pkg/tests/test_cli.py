import os

import numpy as np
import pytest

from ehdr import io
from ehdr.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from ehdr.hdr import mu_law

SMALL_INI = "[model]\nbase_channels = 4\nencoder_blocks = 1\nrecon_blocks = 1\n\n[train]\ncrop_size = 32\n"


def files_under(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "small.ini").write_text(SMALL_INI)
    return tmp_path


class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert main(["tonemap", "--bogus"]) == EXIT_USAGE
        assert "error" in capsys.readouterr().err

    def test_bad_fstops(self, capsys):
        assert main(["brackets", "--hdr", "x.pfm", "--fstops", "a,b", "--out", "o"]) == EXIT_USAGE

    def test_train_without_data(self, workdir, capsys):
        assert main(["train", "--out", "run"]) == EXIT_USAGE

    def test_help_exits_cleanly(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "simulate" in capsys.readouterr().out


class TestDataErrors:
    def test_missing_input(self, workdir, capsys):
        assert main(["tonemap", "--in", "nope.pfm", "--out", "t.png"]) == EXIT_DATA
        assert "nope.pfm" in capsys.readouterr().err

    def test_corrupt_pfm(self, workdir, capsys):
        (workdir / "bad.pfm").write_bytes(b"PF\n4 4\n-1.0\n\0\0")
        assert main(["tonemap", "--in", "bad.pfm", "--out", "t.png"]) == EXIT_DATA
        assert "at byte 12" in capsys.readouterr().err

    def test_empty_dataset(self, workdir, capsys):
        (workdir / "empty").mkdir()
        assert main(["train", "--data", "empty", "--out", "run"]) == EXIT_DATA


class TestCommands:
    def test_tonemap(self, workdir, rng):
        hdr = rng.uniform(0, 1, (6, 5, 3)).astype(np.float32)
        io.write_pfm(workdir / "h.pfm", hdr)
        assert main(["tonemap", "--in", "h.pfm", "--out", "t.png"]) == EXIT_OK
        np.testing.assert_allclose(io.read_png(workdir / "t.png"), mu_law(hdr), atol=0.5 / 255 + 1e-6)

    def test_brackets_then_merge(self, workdir, rng):
        hdr = (10.0 ** rng.uniform(-2, 0, (8, 8, 3))).astype(np.float32)
        io.write_pfm(workdir / "h.pfm", hdr)
        assert main(["brackets", "--hdr", "h.pfm", "--noiseless", "--out", "br"]) == EXIT_OK
        inputs = [f"br/bracket_{i}.png" for i in range(3)]
        assert main(["merge-hdr", "--in", *inputs, "--out", "m.pfm"]) == EXIT_OK
        merged = io.read_pfm(workdir / "m.pfm")
        assert merged.shape == hdr.shape and np.isfinite(merged).all()
        # merged radiance is proportional to the input
        ratio = merged / hdr
        assert np.std(ratio) / np.mean(ratio) < 0.05

    def test_simulate_is_seeded(self, workdir):
        for name in ("a", "b"):
            assert main(["simulate", "--seed", "3", "--size", "32", "--out", name]) == EXIT_OK
        for f in ("events.ehev", "gt.pfm", "bracket_0.png", "bracket_0.txt"):
            assert (workdir / "a" / f).read_bytes() == (workdir / "b" / f).read_bytes(), f

    def test_simulate_from_frames(self, workdir, rng):
        frames = workdir / "frames"
        frames.mkdir()
        base = rng.uniform(0.1, 1.0, (16, 16, 3)).astype(np.float32)
        entries = []
        for i in range(7):
            io.write_pfm(frames / f"f{i}.pfm", np.roll(base, i, axis=1))
            entries.append((i, i * 1000, f"f{i}.pfm"))
        io.write_frame_manifest(frames / "manifest.txt", entries)
        assert main(["simulate", "--frames", "frames", "--out", "sim"]) == EXIT_OK
        assert len(io.read_ehev(workdir / "sim" / "events.ehev")) > 0
        assert io.read_ldr(workdir / "sim" / "bracket_2.png").timestamp == 6000

    def test_train_infer_evaluate(self, workdir, capsys):
        assert main(["simulate", "--size", "32", "--out", "data/s0"]) == EXIT_OK
        before = set(files_under(workdir))
        args = ["--config", "small.ini", "--seed", "1"]
        assert main(["train", *args, "--data", "data", "--steps", "2", "--out", "run"]) == EXIT_OK
        assert main(["infer", "--checkpoint", "run/model.ckpt", "--data", "data", "--out", "pred"]) == EXIT_OK
        assert main(["evaluate", "--pred", "pred", "--gt", "data", "--out", "rep/r.csv"]) == EXIT_OK
        assert "mean over 1 samples" in capsys.readouterr().out
        new = set(files_under(workdir)) - before
        assert all(p.split(os.sep)[0] in ("run", "pred", "rep") for p in new), new

    def test_train_reproducible(self, workdir):
        for name in ("r1", "r2"):
            assert main(["train", "--config", "small.ini", "--seed", "2", "--synthetic", "1",
                         "--steps", "2", "--out", name]) == EXIT_OK
        assert (workdir / "r1" / "loss.csv").read_text() == (workdir / "r2" / "loss.csv").read_text()

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == EXIT_OK
        assert "checks passed" in capsys.readouterr().out

    def test_selftest(self, workdir, capsys):
        assert main(["selftest", "--steps", "2", "--out", "st"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "naive merge PSNR-mu" in out and (workdir / "st" / "model.ckpt").exists()
        assert files_under(workdir) == sorted(["small.ini"] + [os.path.join("st", f) for f in files_under(workdir / "st")])
