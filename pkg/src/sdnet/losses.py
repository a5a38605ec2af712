"""Training objective: multi-resolution STFT loss plus waveform-discriminator terms."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from . import ops
from .dsp import StftConfig, stft_tensor
from .errors import InvalidInputError

LOG_EPS = 1e-7

# (fft_bins, hop_len, window_len) per scale
MSTFT_SCALES = ((512, 50, 240), (1024, 120, 600), (2048, 240, 1200))


@dataclass(frozen=True)
class MstftConfig:
    scales: tuple[StftConfig, ...] = tuple(StftConfig(n, w, h) for n, h, w in MSTFT_SCALES)


def magnitude(spec: torch.Tensor) -> torch.Tensor:
    """|S| from a packed [..., 2, F, T] spectrogram, with a zero-safe square root."""
    power = spec.pow(2).sum(dim=-3)
    nonzero = power > 0
    safe = torch.where(nonzero, power, torch.ones_like(power))
    return torch.where(nonzero, safe.sqrt(), torch.zeros_like(power))


def _convergence_and_log_gaps(pred, target, cfg: StftConfig):
    mag_p = magnitude(stft_tensor(pred, cfg))
    mag_t = magnitude(stft_tensor(target, cfg))
    sc = torch.linalg.vector_norm(mag_t - mag_p) / torch.linalg.vector_norm(mag_t).clamp_min(1e-12)
    return sc, (torch.log(mag_t + LOG_EPS) - torch.log(mag_p + LOG_EPS)).abs()


def stft_loss_terms(pred: torch.Tensor, target: torch.Tensor, cfg: StftConfig):
    """(spectral convergence, mean log-magnitude L1) at one resolution."""
    sc, gaps = _convergence_and_log_gaps(pred, target, cfg)
    return sc, gaps.mean()


def mstft_loss(pred: torch.Tensor, target: torch.Tensor, cfg: MstftConfig = MstftConfig(),
               breakdown: list | None = None) -> torch.Tensor:
    """Sum over scales of spectral convergence + log-magnitude L1.

    If ``breakdown`` is a list, ``(sc, log_l1)`` floats are appended per scale.
    """
    if pred.shape != target.shape:
        raise InvalidInputError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    total = pred.new_zeros(())
    for scale in cfg.scales:
        sc, lm = stft_loss_terms(pred, target, scale)
        if breakdown is not None:
            breakdown.append((float(sc.detach()), float(lm.detach())))
        total = total + sc + lm
    return total


def mstft_summands(pred: torch.Tensor, target: torch.Tensor, cfg: MstftConfig = MstftConfig()) -> torch.Tensor:
    """The MSTFT loss as a flat vector of addends: per scale, the convergence term and each bin's log share.

    ``mstft_summands(p, t).sum()`` equals ``mstft_loss(p, t)`` up to summation order.
    Finite-difference checks difference these addends before summing, which keeps
    round-off far below what differencing two totals of size ~20 would give.
    """
    if pred.shape != target.shape:
        raise InvalidInputError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    parts = []
    for scale in cfg.scales:
        sc, gaps = _convergence_and_log_gaps(pred, target, scale)
        parts += [sc.reshape(1), gaps.reshape(-1) / gaps.numel()]
    return torch.cat(parts)


class WaveDiscriminator(nn.Module):
    """Strided 1-D conv stack; returns (score map, intermediate feature maps)."""

    def __init__(self, channels=(16, 32, 64, 64)):
        super().__init__()
        layers = [nn.Conv1d(1, channels[0], 15, padding=7)]
        for cin, cout in zip(channels[:-1], channels[1:]):
            layers.append(nn.Conv1d(cin, cout, 11, stride=4, padding=5))
        layers.append(nn.Conv1d(channels[-1], channels[-1], 5, padding=2))
        self.layers = nn.ModuleList(layers)
        self.out = nn.Conv1d(channels[-1], 1, 3, padding=1)

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = ops.leaky_relu(layer(x))
            feats.append(x)
        return self.out(x), feats


class DiscriminatorEnsemble(nn.Module):
    """Identical discriminators (separate weights) on the waveform decimated by 1, 2 and 4."""

    factors = (1, 2, 4)

    def __init__(self, channels=(16, 32, 64, 64)):
        super().__init__()
        self.discriminators = nn.ModuleList(WaveDiscriminator(channels) for _ in self.factors)

    def forward(self, wave: torch.Tensor):
        x = wave.reshape(-1, 1, wave.shape[-1])
        outs = []
        for i, d in enumerate(self.discriminators):
            if i > 0:
                x = F.avg_pool1d(x, 4, stride=2, padding=1, count_include_pad=False)
            outs.append(d(x))
        return outs


def lsgan_disc_loss(real_outs, fake_outs) -> torch.Tensor:
    loss = 0.0
    for (score_r, _), (score_f, _) in zip(real_outs, fake_outs):
        loss = loss + (score_r - 1).pow(2).mean() + score_f.pow(2).mean()
    return loss


def lsgan_gen_loss(fake_outs) -> torch.Tensor:
    loss = 0.0
    for score_f, _ in fake_outs:
        loss = loss + (score_f - 1).pow(2).mean()
    return loss


def feature_matching(real_outs, fake_outs) -> torch.Tensor:
    loss = 0.0
    for (_, feats_r), (_, feats_f) in zip(real_outs, fake_outs):
        per_layer = [(fr.detach() - ff).abs().mean() for fr, ff in zip(feats_r, feats_f)]
        loss = loss + sum(per_layer) / len(per_layer)
    return loss


def adversarial_losses(pred, target, ensemble: DiscriminatorEnsemble):
    """(gen_loss, disc_loss). The discriminator loss sees a detached ``pred``."""
    fake = ensemble(pred)
    real = ensemble(target)
    disc = lsgan_disc_loss(real, ensemble(pred.detach()))
    return lsgan_gen_loss(fake), disc


def feature_loss(pred, target, ensemble: DiscriminatorEnsemble) -> torch.Tensor:
    return feature_matching(ensemble(target), ensemble(pred))


@dataclass
class LossReport:
    l_mstft: float | torch.Tensor
    l_adv: float | torch.Tensor
    l_f: float | torch.Tensor
    total: float | torch.Tensor = None
    per_scale: list = field(default_factory=list)

    def __post_init__(self):
        if self.total is None:
            self.total = self.l_mstft + self.l_adv + self.l_f

    def record(self, **extra) -> dict:
        row = {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("l_mstft", "l_adv", "l_f", "total")}
        row.update(extra)
        return row


def total_loss(pred, target, ensemble: DiscriminatorEnsemble, cfg: MstftConfig = MstftConfig()) -> LossReport:
    """Generator objective with unit weights: MSTFT + adversarial + feature matching."""
    per_scale = []
    l_mstft = mstft_loss(pred, target, cfg, breakdown=per_scale)
    real = ensemble(target)
    fake = ensemble(pred)
    return LossReport(l_mstft, lsgan_gen_loss(fake), feature_matching(real, fake), per_scale=per_scale)
