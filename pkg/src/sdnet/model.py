"""SDNet: spectral U-Net with gated convolutions and a lattice-block bottleneck.

Tensor layout throughout is ``[batch, channels, freq, time]``. Encoder layers
fold frequency into the batch axis for their 1-D (time) convolutions, LSTM and
attention, so those weights are shared across frequency bins.
"""
from __future__ import annotations

from typing import Callable, NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from . import ops
from .config import ModelConfig
from .dsp import Waveform, istft_tensor, upsample_spectral_tensor
from .errors import GraphConstructionError, InvalidInputError


def _need_channels(x: torch.Tensor, channels: int, where: str, dim: int = 1):
    if x.dim() <= dim or x.shape[dim] != channels:
        raise GraphConstructionError(f"{where}: expected {channels} channels, got input {tuple(x.shape)}")


def fold_freq(x: torch.Tensor) -> torch.Tensor:
    """[B, C, F, T] -> [B*F, C, T]"""
    b, c, f, t = x.shape
    return x.permute(0, 2, 1, 3).reshape(b * f, c, t)


def unfold_freq(x: torch.Tensor, batch: int) -> torch.Tensor:
    """[B*F, C, T] -> [B, C, F, T]"""
    bf, c, t = x.shape
    return x.reshape(batch, bf // batch, c, t).permute(0, 2, 1, 3)


class GatedConv(nn.Module):
    """LeakyReLU(conv_f(x)) * sigmoid(conv_g(x)); with ``gated=False`` the gate branch is absent."""

    def __init__(self, cin, cout, kernel_size, stride=1, padding=0, dims=1, gated=True):
        super().__init__()
        conv = nn.Conv1d if dims == 1 else nn.Conv2d
        self.cin, self.dims = cin, dims
        self.conv_f = conv(cin, cout, kernel_size, stride, padding)
        self.conv_g = conv(cin, cout, kernel_size, stride, padding) if gated else None

    def forward(self, x):
        _need_channels(x, self.cin, f"GatedConv{self.dims}d")
        if x.dim() != self.dims + 2:
            raise GraphConstructionError(f"GatedConv{self.dims}d: got input {tuple(x.shape)}")
        y = ops.leaky_relu(self.conv_f(x))
        if self.conv_g is None:
            return y
        return y * torch.sigmoid(self.conv_g(x))


class FTB(nn.Module):
    """Frequency transform block: learned F x F map along frequency, fused with the identity path."""

    def __init__(self, channels: int, freq_bins: int, reduced: int):
        super().__init__()
        self.channels, self.freq_bins = channels, freq_bins
        self.collapse = nn.Conv2d(channels, reduced, 1)
        self.freq_map = nn.Parameter(torch.eye(freq_bins))
        self.restore = nn.Conv2d(reduced, channels, 1)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x):
        _need_channels(x, self.channels, "FTB")
        if x.shape[2] != self.freq_bins:
            raise GraphConstructionError(
                f"FTB: frequency extent {x.shape[2]} does not match the {self.freq_bins}x{self.freq_bins} map")
        a = ops.leaky_relu(self.collapse(x))
        a = torch.einsum("gf,bcft->bcgt", self.freq_map, a)
        a = ops.leaky_relu(self.restore(a))
        return self.fuse(torch.cat([a, x], dim=1))


class TimeAttention(nn.Module):
    """Frame-level attention: weights from frequency-averaged features, applied to every bin."""

    def __init__(self, channels: int):
        super().__init__()
        bound = channels ** -0.5
        self.wq = nn.Parameter(torch.empty(channels, channels).uniform_(-bound, bound))
        self.wk = nn.Parameter(torch.empty(channels, channels).uniform_(-bound, bound))
        self.wv = nn.Parameter(torch.empty(channels, channels).uniform_(-bound, bound))

    def forward(self, x, key_mask=None):
        """x: [B, C, F, T] -> [B, C, F, T]"""
        frames = x.mean(dim=2).transpose(1, 2)
        values = x.permute(0, 3, 2, 1)
        out = ops.time_attention(frames, self.wq, self.wk, self.wv, key_mask, values=values)
        return out.permute(0, 3, 2, 1)


def _init_lstm(lstm: nn.LSTM):
    h = lstm.hidden_size
    with torch.no_grad():
        for name, p in lstm.named_parameters():
            if name.startswith("bias_ih"):
                p.zero_()
                p[h:2 * h] = 1.0  # forget gate (torch gate order: i, f, g, o)
            elif name.startswith("bias_hh"):
                p.zero_()


class EncoderLayer(nn.Module):
    def __init__(self, index: int, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channel_schedule
        c = ch[index]
        self.index = index
        if index == 0:
            self.cin = 2
            self.reshape = nn.Conv2d(2, c, 3, padding=1)
            self.ftb = FTB(c, cfg.freq_bins, cfg.ftb_channels)
            cur = c
        else:
            self.cin = cur = ch[index - 1]
        self.down = GatedConv(cur, c, (4, 1), stride=(2, 1), padding=(1, 0), dims=2, gated=cfg.use_gconv)
        self.gconv_in = GatedConv(c, c, 3, padding=1, gated=cfg.use_gconv)
        self.lstm = nn.LSTM(c, cfg.lstm_hidden, batch_first=True, bidirectional=True)
        _init_lstm(self.lstm)
        self.lstm_proj = nn.Linear(2 * cfg.lstm_hidden, c)
        self.attn = TimeAttention(c)
        self.gconv_out = GatedConv(c, c, 3, padding=1, gated=cfg.use_gconv)

    def forward(self, x):
        _need_channels(x, self.cin, f"encoder[{self.index}]")
        if self.index == 0:
            x = self.ftb(self.reshape(x))
        x = self.down(x)
        batch = x.shape[0]
        z = self.gconv_in(fold_freq(x))
        seq, _ = self.lstm(z.transpose(1, 2))
        z = z + self.lstm_proj(seq).transpose(1, 2)
        z = unfold_freq(z, batch)
        z = z + self.attn(z)
        return unfold_freq(self.gconv_out(fold_freq(z)), batch)


class LatticeCoefficients(NamedTuple):
    a1: torch.Tensor
    a2: torch.Tensor
    b1: torch.Tensor
    b2: torch.Tensor


class CoefficientAttention(nn.Module):
    """Mean-pool and std-pool branches, each FC-ReLU-FC-Sigmoid, averaged into (a1, a2, b1, b2)."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.channels = channels
        self.mean_fc = nn.Sequential(nn.Linear(channels, hidden), ops.ReLU(), nn.Linear(hidden, 4), nn.Sigmoid())
        self.std_fc = nn.Sequential(nn.Linear(channels, hidden), ops.ReLU(), nn.Linear(hidden, 4), nn.Sigmoid())

    def forward(self, x) -> LatticeCoefficients:
        _need_channels(x, self.channels, "CoefficientAttention")
        c = 0.5 * (self.mean_fc(ops.mean_pool(x)) + self.std_fc(ops.std_pool(x)))
        return LatticeCoefficients(*c.unbind(-1))


def lattice_combine(inp, j_out, k_fn: Callable, coeffs: LatticeCoefficients):
    """Two butterfly stages of a lattice block; returns (M2, N2).

    Coefficients may be Python scalars or per-sample tensors of shape [B].
    """
    if inp.shape != j_out.shape:
        raise GraphConstructionError(f"lattice_combine: I {tuple(inp.shape)} vs J(I) {tuple(j_out.shape)}")

    def bc(a):
        if isinstance(a, torch.Tensor) and a.dim() == 1:
            return a.view(-1, *([1] * (inp.dim() - 1)))
        return a

    a1, a2, b1, b2 = (bc(c) for c in coeffs)
    m1 = inp + a1 * j_out
    n1 = a2 * inp + j_out
    k_m1 = k_fn(m1)
    if k_m1.shape != m1.shape:
        raise GraphConstructionError(f"lattice_combine: K changed shape {tuple(m1.shape)} -> {tuple(k_m1.shape)}")
    return b1 * n1 + k_m1, n1 + b2 * k_m1


def _conv_stack(c: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c, c, 3, padding=1), ops.LeakyReLU(),
                         nn.Conv2d(c, c, 3, padding=1), ops.LeakyReLU())


class LatticeBlock(nn.Module):
    def __init__(self, channels: int, coeff_hidden: int):
        super().__init__()
        self.channels = channels
        self.J = _conv_stack(channels)
        self.K = _conv_stack(channels)
        self.coeff = CoefficientAttention(channels, coeff_hidden)
        self.compress = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x):
        _need_channels(x, self.channels, "LatticeBlock")
        m2, n2 = lattice_combine(x, self.J(x), self.K, self.coeff(x))
        return self.compress(torch.cat([m2, n2], dim=1))


class Bottleneck(nn.Module):
    """Lattice blocks chained with summation residuals; identity when ``use_lbs`` is off."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_in = cfg.channel_schedule[-1]
        c = cfg.lb_channels
        self.enabled = cfg.use_lbs and cfg.lb_count > 0
        project = self.enabled and c != c_in
        self.proj_in = nn.Conv2d(c_in, c, 1) if project else None
        self.proj_out = nn.Conv2d(c, c_in, 1) if project else None
        n_blocks = cfg.lb_count if self.enabled else 0
        self.blocks = nn.ModuleList(LatticeBlock(c, cfg.coeff_hidden) for _ in range(n_blocks))

    def forward(self, x):
        if not self.enabled:
            return x
        if self.proj_in is not None:
            x = self.proj_in(x)
        for block in self.blocks:
            x = x + block(x)
        if self.proj_out is not None:
            x = self.proj_out(x)
        return x


class DecoderLayer(nn.Module):
    """Concat skip, 1-D conv with GLU over time, then transposed conv doubling frequency."""

    def __init__(self, index: int, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channel_schedule
        c = ch[index]
        self.index, self.channels = index, c
        self.cout = 2 if index == 0 else ch[index - 1]
        self.conv = nn.Conv1d(2 * c, 2 * c, 3, padding=1)
        self.up = nn.ConvTranspose2d(c, self.cout, (4, 1), stride=(2, 1), padding=(1, 0))

    def forward(self, x, skip):
        if x.shape != skip.shape:
            raise GraphConstructionError(
                f"decoder[{self.index}]: input {tuple(x.shape)} vs skip {tuple(skip.shape)}")
        _need_channels(x, self.channels, f"decoder[{self.index}]")
        batch = x.shape[0]
        z = F.glu(self.conv(fold_freq(torch.cat([x, skip], dim=1))), dim=1)
        z = self.up(unfold_freq(z, batch))
        return z if self.index == 0 else ops.leaky_relu(z)


class SDNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleList(EncoderLayer(i, cfg) for i in range(4))
        self.bottleneck = Bottleneck(cfg)
        self.decoders = nn.ModuleList(DecoderLayer(i, cfg) for i in range(4))

    def forward_spec(self, spec: torch.Tensor) -> torch.Tensor:
        """[B, 2, F+1, T] complex-packed spectrogram in, same shape out."""
        f = self.cfg.freq_bins
        if spec.dim() != 4 or spec.shape[1] != 2 or spec.shape[2] != f + 1:
            raise GraphConstructionError(f"expected spectrogram [B, 2, {f + 1}, T], got {tuple(spec.shape)}")
        # Nyquist bin bypasses the network so every stage halves a power of two
        z, nyquist = spec[:, :, :f], spec[:, :, f:]
        skips = []
        for enc in self.encoders:
            z = enc(z)
            skips.append(z)
        z = self.bottleneck(z)
        for dec in reversed(self.decoders):
            z = dec(z, skips[dec.index])
        return torch.cat([z, nyquist], dim=2)

    def check_length(self, length: int):
        if length <= self.cfg.stft.fft_bins // 2:
            raise InvalidInputError(
                f"input of {length} samples too short; need more than {self.cfg.stft.fft_bins // 2}")

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        """[B, L] low-rate waveform -> [B, s*L] high-rate waveform."""
        if lr.dim() == 1:
            return self.forward(lr[None])[0]
        self.check_length(lr.shape[-1])
        scale = lr.std(dim=-1, keepdim=True) + 1e-5
        spec = upsample_spectral_tensor(lr / scale, self.cfg.s, self.cfg.stft)
        out = self.forward_spec(spec)
        return istft_tensor(out, self.cfg.stft, self.cfg.s * lr.shape[-1]) * scale


def sdnet_forward(lr_noisy: Waveform, cfg: ModelConfig, params: SDNet | dict) -> Waveform:
    """Enhance one low-rate waveform; ``params`` is a model or a state dict for ``cfg``."""
    model = params if isinstance(params, SDNet) else _model_from_state(cfg, params)
    model.check_length(len(lr_noisy))
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = torch.from_numpy(lr_noisy.samples).to(dtype)
        y = model(x)
    return Waveform(y.double().numpy(), lr_noisy.sample_rate_hz * cfg.s)


def _model_from_state(cfg, state):
    model = SDNet(cfg)
    model.load_state_dict(state)
    return model.eval()


def param_count(cfg: ModelConfig) -> int:
    return sum(p.numel() for p in SDNet(cfg).parameters())


def describe(model: SDNet, frames: int = 40, batch: int = 1) -> list[dict]:
    """Run a dummy spectrogram through the model and record every submodule's I/O shapes."""
    rows = []
    handles = []

    def shape_of(t):
        if isinstance(t, torch.Tensor):
            return tuple(t.shape)
        if isinstance(t, (tuple, list)) and t and isinstance(t[0], torch.Tensor):
            return tuple(t[0].shape)
        return None

    for name, mod in model.named_modules():
        if not name or isinstance(mod, (nn.ModuleList, nn.Sequential)):
            continue

        def hook(m, inp, out, name=name):
            rows.append({"layer": name, "type": type(m).__name__, "input": shape_of(inp),
                         "output": shape_of(out),
                         "params": sum(p.numel() for p in m.parameters(recurse=False))})
        handles.append(mod.register_forward_hook(hook))
    dtype = next(model.parameters()).dtype
    try:
        with torch.no_grad():
            model.forward_spec(torch.zeros(batch, 2, model.cfg.freq_bins + 1, frames, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
    return rows

