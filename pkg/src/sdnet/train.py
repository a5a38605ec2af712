"""Adversarial training loop, checkpointing, the overfit probe and ablation runs."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy.signal import resample

from .checkpoint import load_tensors, save_tensors
from .config import ModelConfig
from .data import SNR_RANGE_DB, TrainingPair, make_pair, synth_noise, synth_speech
from .dsp import Waveform
from .errors import CheckpointError, InvalidInputError, NonFiniteLossError
from .losses import DiscriminatorEnsemble, LossReport, lsgan_disc_loss, mstft_loss, total_loss
from .metrics import si_sdr
from .model import SDNet, param_count

DISC_CHANNELS = (16, 32, 64, 64)


class Ablation(NamedTuple):
    use_gconv: bool = True
    use_lbs: bool = True


# (name, use_gconv, use_lbs) in the order the ablation table lists them
ABLATION_GRID = (("base", False, False), ("+GConv", True, False), ("+LBs", False, True), ("+Both", True, True))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr_g: float = 3e-4
    lr_d: float = 3e-4
    betas: tuple[float, float] = (0.8, 0.99)
    seed: int = 0
    checkpoint_every: int = 0
    precision: str = "single"
    ablation: Ablation | None = None
    clip_norm: float = 5.0
    crop_samples: int | None = None
    deterministic: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidInputError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("single", "double"):
            raise InvalidInputError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.crop_samples is not None and self.crop_samples < 1:
            raise InvalidInputError(f"crop_samples must be positive, got {self.crop_samples}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self.precision == "single" else torch.float64


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    # NaN-filling fresh buffers costs ~20% of a step and adds nothing once outputs are deterministic
    torch.utils.deterministic.fill_uninitialized_memory = False


def _global_norm_clip(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


class Trainer:
    """Owns the generator, the discriminator ensemble and their Adam states.

    ``train_step`` does one discriminator update followed by one generator
    update on the same batch.
    """

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig = TrainConfig(), log_path=None,
                 disc_channels=DISC_CHANNELS):
        if cfg.ablation is not None:
            model_cfg = model_cfg.with_ablation(cfg.ablation.use_gconv, cfg.ablation.use_lbs)
        self.model_cfg, self.cfg = model_cfg, cfg
        if cfg.deterministic:
            set_deterministic(cfg.seed)
        else:
            torch.manual_seed(cfg.seed)
        self.model = SDNet(model_cfg).to(cfg.dtype)
        self.ensemble = DiscriminatorEnsemble(disc_channels).to(cfg.dtype)
        self.g_params = list(self.model.parameters())
        self.d_params = list(self.ensemble.parameters())
        self.opt_g = torch.optim.Adam(self.g_params, lr=cfg.lr_g, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self.d_params, lr=cfg.lr_d, betas=cfg.betas)
        self.step = 0
        self.history: list[dict] = []
        self.log_path = Path(log_path) if log_path else None

    # batches

    def make_batch(self, pairs: Sequence[TrainingPair]):
        """Draw this step's batch. Randomness depends only on (seed, step)."""
        if not pairs:
            raise InvalidInputError("no training pairs")
        rng = np.random.default_rng([self.cfg.seed, self.step])
        n = len(pairs)
        if self.cfg.batch_size >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, self.cfg.batch_size, replace=False)
        lengths = {len(pairs[i].lr_noisy) for i in idx}
        if len(lengths) != 1:
            raise InvalidInputError(f"batch pairs have differing lengths {sorted(lengths)}")
        length = lengths.pop()
        s = self.model_cfg.s
        crop = self.cfg.crop_samples
        lr, hr, meta = [], [], []
        for i in idx:
            p = pairs[i]
            start = 0
            if crop is not None and crop < length:
                start = int(rng.integers(0, length - crop + 1))
            stop = start + (crop if crop is not None and crop < length else length)
            lr.append(p.lr_noisy.samples[start:stop])
            hr.append(p.hr_clean.samples[s * start:s * stop])
            meta.append(dict(p.meta, index=int(i), crop_start=start))
        as_t = lambda xs: torch.from_numpy(np.stack(xs)).to(self.cfg.dtype)
        return as_t(lr), as_t(hr), meta

    # one update

    def train_step(self, lr: torch.Tensor, hr: torch.Tensor, meta=None) -> LossReport:
        t0 = time.perf_counter()
        pred = self.model(lr)

        self.opt_d.zero_grad(set_to_none=True)
        real = self.ensemble(hr)
        fake = self.ensemble(pred.detach())
        disc = lsgan_disc_loss(real, fake)
        self._check_finite("disc_loss", disc, meta)
        disc.backward(inputs=self.d_params)
        _global_norm_clip(self.d_params, self.cfg.clip_norm)
        self.opt_d.step()

        self.opt_g.zero_grad(set_to_none=True)
        report = total_loss(pred, hr, self.ensemble)
        self._check_finite("generator loss", report.total, meta)
        report.total.backward(inputs=self.g_params)
        _global_norm_clip(self.g_params, self.cfg.clip_norm)
        self.opt_g.step()

        self.step += 1
        row = report.record(step=self.step, l_disc=float(disc.detach()),
                            wall_ms=round(1000 * (time.perf_counter() - t0), 3))
        self.history.append(row)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
        return LossReport(row["l_mstft"], row["l_adv"], row["l_f"], row["total"], report.per_scale)

    def _check_finite(self, what: str, value: torch.Tensor, meta) -> None:
        if torch.isfinite(value).all():
            return
        dump = json.dumps(meta, default=str, indent=1)
        if self.log_path is not None:
            path = self.log_path.with_name(f"nonfinite_step{self.step + 1}.json")
            path.write_text(dump)
            where = f" (batch metadata written to {path})"
        else:
            where = ""
        raise NonFiniteLossError(f"{what} is {float(value.detach())} at step {self.step + 1}{where}; batch: {dump}")

    def fit(self, pairs: Sequence[TrainingPair], steps: int | None = None, checkpoint_dir=None,
            valid: Sequence[TrainingPair] = ()) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        every = self.cfg.checkpoint_every
        for _ in range(steps):
            lr, hr, meta = self.make_batch(pairs)
            self.train_step(lr, hr, meta)
            if checkpoint_dir is not None and every and self.step % every == 0:
                self.save_checkpoint(Path(checkpoint_dir) / f"step{self.step:07d}.ckpt")
                if valid:
                    self.history[-1]["valid"] = self.validate(valid)
        return self.history

    # evaluation

    def enhance(self, lr: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model(lr.to(self.cfg.dtype))

    def validate(self, pairs: Sequence[TrainingPair]) -> dict:
        l_m, gains = [], []
        for p in pairs:
            lr = torch.from_numpy(p.lr_noisy.samples).to(self.cfg.dtype)[None]
            hr = torch.from_numpy(p.hr_clean.samples).to(self.cfg.dtype)[None]
            out = self.enhance(lr)
            l_m.append(float(mstft_loss(out, hr)))
            gains.append(si_sdr(out[0].double().numpy(), p.hr_clean.samples))
        return {"l_mstft": float(np.mean(l_m)), "si_sdr_db": float(np.mean(gains))}

    # checkpoints

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"g/{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"d/{k}": v for k, v in self.ensemble.state_dict().items()})
        for tag, opt, params in (("opt_g", self.opt_g, self.g_params), ("opt_d", self.opt_d, self.d_params)):
            for i, p in enumerate(params):
                st = opt.state.get(p)
                if not st:
                    continue
                out[f"{tag}/{i}/exp_avg"] = st["exp_avg"]
                out[f"{tag}/{i}/exp_avg_sq"] = st["exp_avg_sq"]
                out[f"{tag}/{i}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(())
        out["trainer/step"] = torch.tensor(float(self.step))
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        def section(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        try:
            self.model.load_state_dict({k: v.to(self.cfg.dtype) for k, v in section("g/").items()})
            self.ensemble.load_state_dict({k: v.to(self.cfg.dtype) for k, v in section("d/").items()})
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint does not match this model configuration: {exc}") from None
        for tag, opt, params in (("opt_g", self.opt_g, self.g_params), ("opt_d", self.opt_d, self.d_params)):
            opt.state.clear()
            for i, p in enumerate(params):
                key = f"{tag}/{i}/"
                if key + "exp_avg" not in tensors:
                    continue
                opt.state[p] = {"step": tensors[key + "step"].clone().float(),
                                "exp_avg": tensors[key + "exp_avg"].to(self.cfg.dtype).clone(),
                                "exp_avg_sq": tensors[key + "exp_avg_sq"].to(self.cfg.dtype).clone()}
        if "trainer/step" not in tensors:
            raise CheckpointError("checkpoint lacks the trainer step counter")
        self.step = int(tensors["trainer/step"])

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        save_tensors(path, self.state_tensors())
        self.model_cfg.save(config_path(path))

    def load_checkpoint(self, path) -> None:
        self.load_state_tensors(load_tensors(path))


def config_path(ckpt_path) -> Path:
    """Model config lives next to its checkpoint: ``x.ckpt`` -> ``x.ckpt.cfg``."""
    p = Path(ckpt_path)
    return p.with_name(p.name + ".cfg")


def load_model(ckpt_path, cfg: ModelConfig | None = None) -> SDNet:
    """Rebuild the generator from a checkpoint (config read from the sidecar file unless given)."""
    ckpt_path = Path(ckpt_path)
    tensors = load_tensors(ckpt_path)
    if cfg is None:
        side = config_path(ckpt_path)
        if not side.exists():
            raise CheckpointError(f"{ckpt_path}: model config {side} not found")
        cfg = ModelConfig.load(side)
    model = SDNet(cfg)
    state = {k[2:]: v for k, v in tensors.items() if k.startswith("g/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{ckpt_path}: parameters do not match config: {exc}") from None
    return model.eval()


# overfit probe

def probe_pairs(n_pairs: int, seed: int = 0, duration_s: float = 1.0, s: int = 2) -> list[TrainingPair]:
    """Synthetic (speech, noise) pairs with SNRs drawn uniformly from the training range."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        a, b = (int(v) for v in rng.integers(0, 2 ** 31 - 1, size=2))
        snr = float(rng.uniform(*SNR_RANGE_DB))
        pairs.append(make_pair(synth_speech(a, duration_s), synth_noise(b, duration_s), snr, s,
                               meta={"pair": i, "speech_seed": a, "noise_seed": b}))
    return pairs


def fourier_upsample(wave: Waveform, s: int) -> Waveform:
    """Band-limited (FFT zero-padding) upsampling: the no-model baseline."""
    return Waveform(resample(wave.samples, s * len(wave)), wave.sample_rate_hz * s)


@dataclass
class ProbeReport:
    steps: int
    initial_l_mstft: float
    final_l_mstft: float
    si_sdr_enhanced_db: float
    si_sdr_baseline_db: float
    history: list[dict] = field(default_factory=list, repr=False)
    params: int = 0

    @property
    def l_mstft_ratio(self) -> float:
        return self.final_l_mstft / self.initial_l_mstft

    @property
    def si_sdr_gain_db(self) -> float:
        return self.si_sdr_enhanced_db - self.si_sdr_baseline_db

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("history")
        d.update(l_mstft_ratio=self.l_mstft_ratio, si_sdr_gain_db=self.si_sdr_gain_db)
        return d


def _batch_mstft(trainer: Trainer, pairs) -> tuple[float, torch.Tensor]:
    lr = torch.from_numpy(np.stack([p.lr_noisy.samples for p in pairs])).to(trainer.cfg.dtype)
    hr = torch.from_numpy(np.stack([p.hr_clean.samples for p in pairs])).to(trainer.cfg.dtype)
    out = trainer.enhance(lr)
    return float(mstft_loss(out, hr)), out


def overfit_probe(n_pairs: int = 4, steps: int = 2000, model_cfg: ModelConfig | None = None,
                  train_cfg: TrainConfig | None = None, duration_s: float = 1.0, log_path=None,
                  trainer_out: list | None = None) -> ProbeReport:
    """Train on a few fixed synthetic pairs and report how far the fit gets.

    si_sdr figures are means over the training clips; the baseline is the
    Fourier-upsampled noisy input.
    """
    model_cfg = model_cfg or ModelConfig.tiny()
    train_cfg = train_cfg or TrainConfig(steps=steps, batch_size=n_pairs)
    pairs = probe_pairs(n_pairs, train_cfg.seed, duration_s, model_cfg.s)
    trainer = Trainer(model_cfg, train_cfg, log_path=log_path)
    initial, _ = _batch_mstft(trainer, pairs)
    trainer.fit(pairs, steps)
    final, out = _batch_mstft(trainer, pairs)
    enhanced = [si_sdr(o.double().numpy(), p.hr_clean.samples) for o, p in zip(out, pairs)]
    baseline = [si_sdr(fourier_upsample(p.lr_noisy, model_cfg.s).samples, p.hr_clean.samples) for p in pairs]
    if trainer_out is not None:
        trainer_out.append(trainer)
    return ProbeReport(steps, initial, final, float(np.mean(enhanced)), float(np.mean(baseline)),
                       trainer.history, sum(p.numel() for p in trainer.g_params))


def run_ablations(steps: int = 10, model_cfg: ModelConfig | None = None, seed: int = 0,
                  n_pairs: int = 2, duration_s: float = 0.5) -> list[dict]:
    """Build and briefly train every ablation configuration; returns one row per configuration."""
    model_cfg = model_cfg or ModelConfig.tiny()
    pairs = probe_pairs(n_pairs, seed, duration_s, model_cfg.s)
    rows = []
    for name, gconv, lbs in ABLATION_GRID:
        cfg = TrainConfig(steps=steps, batch_size=n_pairs, seed=seed, ablation=Ablation(gconv, lbs))
        trainer = Trainer(model_cfg, cfg)
        trainer.fit(pairs)
        last = trainer.history[-1] if trainer.history else {}
        rows.append({"config": name, "use_gconv": gconv, "use_lbs": lbs,
                     "params": param_count(trainer.model_cfg), "steps": trainer.step,
                     "final_total": last.get("total", math.nan)})
    return rows
