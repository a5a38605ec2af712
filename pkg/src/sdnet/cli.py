"""``sdnet`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import sys
import wave as _wave
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import (CheckpointError, GraphConstructionError, InvalidInputError, NonFiniteLossError,
                     VerificationError)

EXPECTED_ERRORS = (InvalidInputError, GraphConstructionError, CheckpointError, NonFiniteLossError,
                   VerificationError, OSError, _wave.Error)


def _parse_ablation(text: str):
    from .train import Ablation

    flags = {"gconv": True, "lbs": True}
    for item in filter(None, (t.strip() for t in text.split(","))):
        key, _, value = item.partition("=")
        if key not in flags or value not in ("on", "off"):
            raise argparse.ArgumentTypeError(
                f"bad ablation item {item!r}; expected gconv=on|off and/or lbs=on|off")
        flags[key] = value == "on"
    return Ablation(flags["gconv"], flags["lbs"])


def _model_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig.tiny()
    if path in ("tiny", "reference"):
        return getattr(ModelConfig, path)()
    return ModelConfig.load(path)


# synth-data

def cmd_synth_data(args) -> int:
    from .data import build_manifest

    manifest = build_manifest(args.clean_dir, args.noise_dir, args.hours, args.seed, args.duration)
    manifest.save(args.out)
    print(f"wrote {len(manifest.train)} train / {len(manifest.valid)} valid records to {args.out}")
    return 0


# train

def cmd_train(args) -> int:
    from .data import PairManifest, pair_from_record
    from .train import TrainConfig, Trainer

    cfg = _model_config(args.config)
    manifest = PairManifest.load(args.manifest)
    if not manifest.train:
        raise InvalidInputError(f"{args.manifest}: manifest has no training records")
    pairs = [pair_from_record(r, cfg.s) for r in manifest.train]
    valid = [pair_from_record(r, cfg.s) for r in manifest.valid]
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed,
                       checkpoint_every=args.checkpoint_every, precision=args.precision,
                       ablation=args.ablation, crop_samples=args.crop)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, tcfg, log_path=out / "train_log.jsonl")
    if args.resume:
        trainer.load_checkpoint(args.resume)
        print(f"resumed from {args.resume} at step {trainer.step}")
    remaining = max(0, tcfg.steps - trainer.step)
    trainer.fit(pairs, remaining, checkpoint_dir=out, valid=valid)
    final = out / "final.ckpt"
    trainer.save_checkpoint(final)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained to step {trainer.step}; last total loss {last.get('total', float('nan')):.4f}; "
          f"checkpoint {final}")
    return 0


# enhance

def _dump_spectrogram(wave, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .dsp import HR_STFT, stft
    from .losses import magnitude

    mag = magnitude(stft(wave, HR_STFT).data).numpy()
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.imshow(20 * np.log10(mag + 1e-8), origin="lower", aspect="auto", cmap="magma",
              extent=(0, wave.duration_s, 0, wave.sample_rate_hz / 2), vmin=-100)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (Hz)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_enhance(args) -> int:
    from .dsp import read_wav, write_wav
    from .model import sdnet_forward
    from .train import load_model

    model = load_model(args.model)
    cfg = model.cfg
    lr_rate = 16000 // cfg.s
    lr = read_wav(args.inp, expected_rate=lr_rate)
    hr = sdnet_forward(lr, cfg, model)
    write_wav(args.out, hr)
    print(f"{args.inp}: {len(lr)} samples @ {lr.sample_rate_hz} Hz -> {args.out}: "
          f"{len(hr)} samples @ {hr.sample_rate_hz} Hz")
    if args.dump_spectrograms:
        d = Path(args.dump_spectrograms)
        d.mkdir(parents=True, exist_ok=True)
        _dump_spectrogram(lr, d / "input.png")
        _dump_spectrogram(hr, d / "output.png")
        print(f"spectrograms written to {d}")
    return 0


# eval

def _pairs_for_eval(est: Path, ref: Path):
    if est.is_dir() != ref.is_dir():
        raise InvalidInputError("--est and --ref must both be files or both be directories")
    if not est.is_dir():
        return [(est.name, est, ref)]
    out = []
    for r in sorted(ref.glob("*.wav")):
        e = est / r.name
        if not e.exists():
            raise InvalidInputError(f"no estimate for reference {r.name} in {est}")
        out.append((r.name, e, r))
    if not out:
        raise InvalidInputError(f"{ref}: no .wav references")
    return out


def cmd_eval(args) -> int:
    from .dsp import read_wav
    from .metrics import MetricsReport

    report = MetricsReport()
    for name, e, r in _pairs_for_eval(Path(args.est), Path(args.ref)):
        ref = read_wav(r)
        est = read_wav(e, expected_rate=ref.sample_rate_hz)
        report.add(name, est, ref)
    print(f"{'file':<28s} {'stoi':>7s} {'lsd_db':>8s} {'si_sdr_db':>10s} {'snr_db':>8s}")
    for row in report.rows:
        print(f"{row['file']:<28s} {row['stoi']:7.4f} {row['lsd_db']:8.3f} {row['si_sdr_db']:10.3f} "
              f"{row['snr_db']:8.3f}")
    mean = report.mean()
    print(f"{'mean':<28s} {mean['stoi']:7.4f} {mean['lsd_db']:8.3f} {mean['si_sdr_db']:10.3f} "
          f"{mean['snr_db']:8.3f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in report.rows:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps(dict(mean, file="mean")) + "\n")
    return 0


# grad-check

def cmd_grad_check(args) -> int:
    from .gradsuite import format_table, grad_check_all

    try:
        results = grad_check_all(args.only, seed=args.seed)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from None
    print(format_table(results))
    return 0 if all(r.passed for _, r in results) else 1


# describe

def cmd_describe(args) -> int:
    from .model import SDNet, describe

    cfg = _model_config(args.config)
    model = SDNet(cfg)
    rows = describe(model, frames=args.frames)
    print(f"{'layer':<44s} {'type':<22s} {'input':<22s} {'output':<22s} {'params':>8s}")
    for r in rows:
        print(f"{r['layer']:<44s} {r['type']:<22s} {str(r['input']):<22s} {str(r['output']):<22s} "
              f"{r['params']:8d}")
    print(f"total parameters: {sum(p.numel() for p in model.parameters())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdnet", description="Joint denoising and 8 kHz -> 16 kHz speech super-resolution.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="build a train/valid pair manifest from clean and noise WAV folders")
    s.add_argument("--clean-dir", required=True)
    s.add_argument("--noise-dir", required=True)
    s.add_argument("--hours", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="directory for train.jsonl and valid.jsonl")
    s.add_argument("--duration", type=float, default=5.0, help="clip length in seconds (default 5)")
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="adversarial training from a manifest")
    t.add_argument("--config", help="model config file, or 'tiny' / 'reference' (default tiny)")
    t.add_argument("--manifest", required=True, help="directory written by synth-data")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--steps", type=int, required=True, help="total step count (a resumed run continues to it)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--ablation", type=_parse_ablation, default=None, help="e.g. gconv=off,lbs=on")
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--crop", type=int, default=None, help="random low-rate crop length in samples")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--precision", choices=("single", "double"), default="single")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance an 8 kHz noisy WAV into a 16 kHz WAV")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--model", required=True, help="checkpoint (its .cfg sidecar must sit beside it)")
    e.add_argument("--out", required=True)
    e.add_argument("--dump-spectrograms", metavar="DIR", help="write input/output magnitude images here")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="STOI, LSD, SI-SDR and SNR of estimates against references")
    v.add_argument("--est", required=True, help="WAV file or directory")
    v.add_argument("--ref", required=True, help="WAV file or directory (same file names)")
    v.add_argument("--out", help="also write one JSON record per file plus a mean record")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference verification of every gradient")
    g.add_argument("--only", nargs="+", metavar="GROUP",
                   help="backbone, gconv, ftb, lattice, losses and/or end2end")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)

    d = sub.add_parser("describe", help="per-layer input/output shapes and parameter counts")
    d.add_argument("--config", help="model config file, or 'tiny' / 'reference' (default tiny)")
    d.add_argument("--frames", type=int, default=40)
    d.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"sdnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
