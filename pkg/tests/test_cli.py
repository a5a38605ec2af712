import json
import shutil
import subprocess
from pathlib import Path

import pytest
import torch

from sdnet import ops
from sdnet.cli import main
from sdnet.dsp import read_wav

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """synth-data then train on the shipped fixture audio; returns the run directory."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--clean-dir", str(FIXTURES / "clean"), "--noise-dir", str(FIXTURES / "noise"),
                 "--hours", "0.001", "--seed", "0", "--duration", "1", "--out", str(root / "manifest")]) == 0
    assert main(["train", "--manifest", str(root / "manifest"), "--out-dir", str(root / "run"), "--steps", "2",
                 "--batch-size", "2", "--crop", "2000", "--ablation", "gconv=on,lbs=on"]) == 0
    return root


def test_synth_data_writes_manifest(trained):
    lines = (trained / "manifest" / "train.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[0])["duration_s"] == 1.0


def test_train_writes_log_and_checkpoint(trained):
    rows = [json.loads(x) for x in (trained / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2]
    assert (trained / "run" / "final.ckpt").exists() and (trained / "run" / "final.ckpt.cfg").exists()


def test_train_resume_continues_to_total(trained, capsys):
    run = trained / "resumed"
    assert main(["train", "--manifest", str(trained / "manifest"), "--out-dir", str(run), "--steps", "3",
                 "--batch-size", "2", "--crop", "2000", "--resume", str(trained / "run" / "final.ckpt")]) == 0
    assert "at step 2" in capsys.readouterr().out
    rows = (run / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(r)["step"] for r in rows] == [3]


def test_enhance_doubles_rate_and_dumps_images(trained, tmp_path):
    out = tmp_path / "hr.wav"
    assert main(["enhance", "--in", str(FIXTURES / "lr_noisy_8k.wav"), "--model", str(trained / "run" / "final.ckpt"),
                 "--out", str(out), "--dump-spectrograms", str(tmp_path / "img")]) == 0
    lr, hr = read_wav(FIXTURES / "lr_noisy_8k.wav"), read_wav(out)
    assert hr.sample_rate_hz == 16000 and len(hr) == 2 * len(lr)
    assert (tmp_path / "img" / "input.png").stat().st_size > 0
    assert (tmp_path / "img" / "output.png").stat().st_size > 0


def test_enhance_missing_checkpoint(tmp_path, capsys):
    rc = main(["enhance", "--in", str(FIXTURES / "lr_noisy_8k.wav"), "--model", str(tmp_path / "none.ckpt"),
               "--out", str(tmp_path / "o.wav")])
    assert rc != 0
    assert "not found" in capsys.readouterr().err


def test_enhance_rejects_wrong_rate(trained, tmp_path, capsys):
    rc = main(["enhance", "--in", str(FIXTURES / "clean" / "speech_a.wav"), "--model",
               str(trained / "run" / "final.ckpt"), "--out", str(tmp_path / "o.wav")])
    assert rc == 1 and "8000" in capsys.readouterr().err


def test_eval_files_and_directories(tmp_path, capsys):
    ref = FIXTURES / "clean" / "speech_a.wav"
    assert main(["eval", "--est", str(ref), "--ref", str(ref), "--out", str(tmp_path / "m.jsonl")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert rows[0]["file"] == "speech_a.wav" and rows[0]["stoi"] == pytest.approx(1.0, abs=1e-6)
    assert rows[-1]["file"] == "mean"
    est_dir = tmp_path / "est"
    shutil.copytree(FIXTURES / "clean", est_dir)
    assert main(["eval", "--est", str(est_dir), "--ref", str(FIXTURES / "clean")]) == 0
    assert "mean" in capsys.readouterr().out


def test_eval_length_mismatch(tmp_path, capsys):
    rc = main(["eval", "--est", str(FIXTURES / "noise" / "hum_tilt.wav"),
               "--ref", str(FIXTURES / "lr_noisy_8k.wav")])
    assert rc == 1 and "error" in capsys.readouterr().err


def test_unknown_flag_and_bad_ablation(trained):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--manifest", "x", "--out-dir", "y", "--steps", "1", "--learning-rate", "3"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        main(["train", "--manifest", "x", "--out-dir", "y", "--steps", "1", "--ablation", "gconv=maybe"])
    assert exc.value.code != 0


def test_grad_check_only_lattice(capsys):
    assert main(["grad-check", "--only", "lattice"]) == 0
    out = capsys.readouterr().out
    assert "lattice" in out and "gconv" not in out and "FAIL" not in out


def test_grad_check_unknown_group(capsys):
    assert main(["grad-check", "--only", "everything"]) == 1
    assert "everything" in capsys.readouterr().err


class _SignBugLeakyReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, slope=ops.LEAKY_SLOPE):
        ctx.save_for_backward(x)
        ctx.slope = slope
        return torch.where(x >= 0, x, slope * x)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return -grad * torch.where(x >= 0, torch.ones_like(x), torch.full_like(x, ctx.slope)), None


def test_grad_check_catches_injected_sign_bug(monkeypatch, capsys):
    monkeypatch.setattr(ops, "leaky_relu", lambda x, slope=ops.LEAKY_SLOPE: _SignBugLeakyReLU.apply(x, slope))
    assert main(["grad-check", "--only", "gconv"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_describe_console_script():
    exe = shutil.which("sdnet")
    assert exe is not None
    res = subprocess.run([exe, "describe", "--config", "tiny", "--frames", "8"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "encoders.0.ftb" in res.stdout and "total parameters: 88776" in res.stdout
