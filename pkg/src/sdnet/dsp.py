"""Signal-processing primitives: STFT/iSTFT, complex packing, decimation, WAV I/O.

The STFT pair is written with plain torch ops so it stays differentiable and can
be used inside the model and the losses. Spectrograms carry real/imag parts in
a channel axis of size 2, laid out as ``[..., 2, freq_bins, frames]``.
"""
from __future__ import annotations

import wave as _wave
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import firwin

from .errors import InvalidInputError

WINDOWS = ("hann", "rect")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if int(self.sample_rate_hz) <= 0:
            raise InvalidInputError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class StftConfig:
    fft_bins: int = 512
    window_len: int = 512
    hop_len: int = 64
    window: str = "hann"
    centered: bool = True

    def __post_init__(self):
        if min(self.fft_bins, self.window_len, self.hop_len) <= 0:
            raise InvalidInputError(f"STFT sizes must be positive: {self}")
        if self.window_len > self.fft_bins:
            raise InvalidInputError(f"window_len {self.window_len} exceeds fft_bins {self.fft_bins}")
        if self.hop_len > self.window_len:
            raise InvalidInputError(f"hop_len {self.hop_len} exceeds window_len {self.window_len}")
        if self.window not in WINDOWS:
            raise InvalidInputError(f"unknown window {self.window!r}, expected one of {WINDOWS}")

    @property
    def freq_bins(self) -> int:
        return self.fft_bins // 2 + 1

    def check_invertible(self):
        # Hann needs an integer number of hops per window for constant overlap-add.
        if self.window_len % self.hop_len:
            raise InvalidInputError(
                f"window_len {self.window_len} not divisible by hop_len {self.hop_len}; "
                "overlap-add reconstruction is not exact")

    def num_frames(self, length: int) -> int:
        if self.centered:
            return length // self.hop_len + 1
        return (length - self.fft_bins) // self.hop_len + 1


HR_STFT = StftConfig(512, 512, 64)


@dataclass
class Spectrogram:
    data: torch.Tensor
    origin_config: StftConfig | None = None

    def __post_init__(self):
        if self.data.dim() < 3 or self.data.shape[-3] != 2:
            raise InvalidInputError(
                f"spectrogram data must have shape [..., 2, F, T], got {tuple(self.data.shape)}")
        if self.origin_config is not None and self.data.shape[-2] != self.origin_config.freq_bins:
            raise InvalidInputError(
                f"{self.data.shape[-2]} freq bins inconsistent with fft_bins={self.origin_config.fft_bins}")

    @property
    def shape(self):
        return tuple(self.data.shape)


@lru_cache(maxsize=32)
def _window_cached(window: str, window_len: int, fft_bins: int, dtype: torch.dtype) -> torch.Tensor:
    if window == "hann":
        w = torch.hann_window(window_len, periodic=True, dtype=torch.float64)
    else:
        w = torch.ones(window_len, dtype=torch.float64)
    left = (fft_bins - window_len) // 2
    return F.pad(w, (left, fft_bins - window_len - left)).to(dtype)


def analysis_window(cfg: StftConfig, dtype=torch.float64) -> torch.Tensor:
    """Window zero-padded (centred) to ``fft_bins`` samples."""
    return _window_cached(cfg.window, cfg.window_len, cfg.fft_bins, dtype)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        return torch.from_numpy(x.samples)
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))
    return x


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Differentiable STFT of ``x[..., L]`` returning ``[..., 2, F, frames]``."""
    if x.shape[-1] == 0:
        raise InvalidInputError("cannot take the STFT of an empty signal")
    lead, length = x.shape[:-1], x.shape[-1]
    flat = x.reshape(-1, 1, length)
    if cfg.centered:
        pad = cfg.fft_bins // 2
        if length <= pad:
            raise InvalidInputError(
                f"signal of {length} samples too short for centred reflect padding of {pad}")
        flat = F.pad(flat, (pad, pad), mode="reflect")
    elif length < cfg.fft_bins:
        raise InvalidInputError(f"signal of {length} samples shorter than fft_bins={cfg.fft_bins}")
    frames = flat[:, 0].unfold(-1, cfg.fft_bins, cfg.hop_len)
    spec = torch.fft.rfft(frames * analysis_window(cfg, x.dtype), dim=-1)
    out = torch.stack([spec.real, spec.imag], dim=1).transpose(-1, -2)
    return out.reshape(*lead, 2, cfg.freq_bins, frames.shape[1])


def istft_tensor(spec: torch.Tensor, cfg: StftConfig, length: int) -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft_tensor`, trimmed to ``length``."""
    cfg.check_invertible()
    if spec.dim() < 3 or spec.shape[-3] != 2 or spec.shape[-2] != cfg.freq_bins:
        raise InvalidInputError(
            f"spectrogram shape {tuple(spec.shape)} does not match config with "
            f"{cfg.freq_bins} freq bins")
    if length <= 0:
        raise InvalidInputError(f"out_len must be positive, got {length}")
    lead, frames = spec.shape[:-3], spec.shape[-1]
    flat = spec.reshape(-1, 2, cfg.freq_bins, frames)
    z = torch.complex(flat[:, 0], flat[:, 1])
    win = analysis_window(cfg, spec.dtype)
    seg = torch.fft.irfft(z, n=cfg.fft_bins, dim=1) * win[:, None]
    total = (frames - 1) * cfg.hop_len + cfg.fft_bins
    fold = dict(output_size=(1, total), kernel_size=(1, cfg.fft_bins), stride=(1, cfg.hop_len))
    y = F.fold(seg, **fold)[:, 0, 0]
    env = F.fold((win ** 2)[None, :, None].expand(1, -1, frames), **fold)[0, 0, 0]
    y = y / torch.where(env > 1e-11, env, torch.ones_like(env))
    start = cfg.fft_bins // 2 if cfg.centered else 0
    if length > total - start:
        raise InvalidInputError(
            f"out_len {length} exceeds the {total - start} samples covered by {frames} frames")
    return y[:, start:start + length].reshape(*lead, length)


def stft(wave, cfg: StftConfig) -> Spectrogram:
    x = _as_tensor(wave)
    if x.numel() == 0:
        raise InvalidInputError("empty waveform")
    if not torch.isfinite(x).all():
        raise InvalidInputError("waveform contains non-finite samples")
    return Spectrogram(stft_tensor(x, cfg), cfg)


def istft(spec: Spectrogram, cfg: StftConfig, out_len: int, sample_rate_hz: int = 16000) -> Waveform:
    y = istft_tensor(spec.data, cfg, out_len)
    if y.dim() != 1:
        raise InvalidInputError("istft to Waveform expects a single [2, F, T] spectrogram")
    return Waveform(y.detach().cpu().numpy(), sample_rate_hz)


def lr_stft_config(s: int, hr_cfg: StftConfig) -> StftConfig:
    """STFT settings for the s-times lower-rate input: window and hop shrunk by s, FFT size kept."""
    if s < 1:
        raise InvalidInputError(f"upsampling factor must be >= 1, got {s}")
    if hr_cfg.window_len % s or hr_cfg.hop_len % s:
        raise InvalidInputError(
            f"window_len {hr_cfg.window_len} and hop_len {hr_cfg.hop_len} must be divisible by s={s}")
    return replace(hr_cfg, window_len=hr_cfg.window_len // s, hop_len=hr_cfg.hop_len // s)


def upsample_spectral_tensor(x: torch.Tensor, s: int, hr_cfg: StftConfig) -> torch.Tensor:
    return stft_tensor(x, lr_stft_config(s, hr_cfg))


def upsample_spectral(lr, s: int, hr_cfg: StftConfig = HR_STFT) -> Spectrogram:
    """Spectrogram of the low-rate signal on the same grid as the high-rate target.

    Frame count matches the ``s``-times longer signal under ``hr_cfg`` because
    both window and hop shrink by ``s`` while the FFT size stays fixed.
    """
    cfg = lr_stft_config(s, hr_cfg)
    return Spectrogram(stft(lr, cfg).data, hr_cfg)


def pack_complex(re: torch.Tensor, im: torch.Tensor, cfg: StftConfig | None = None) -> Spectrogram:
    if re.shape != im.shape:
        raise InvalidInputError(f"real/imag shape mismatch: {tuple(re.shape)} vs {tuple(im.shape)}")
    return Spectrogram(torch.stack([re, im], dim=-3), cfg)


def unpack_complex(spec: Spectrogram) -> tuple[torch.Tensor, torch.Tensor]:
    return spec.data.select(-3, 0), spec.data.select(-3, 1)


DECIMATION_TAPS = 127
DECIMATION_BETA = 8.0


@lru_cache(maxsize=8)
def decimation_filter(s: int) -> np.ndarray:
    """Kaiser-windowed sinc low-pass with cutoff at 0.9 of the post-decimation Nyquist."""
    return firwin(DECIMATION_TAPS, 0.9 / s, window=("kaiser", DECIMATION_BETA))


def resample_down(wave: Waveform, s: int) -> Waveform:
    if s < 2:
        raise InvalidInputError(f"decimation factor must be >= 2, got {s}")
    if len(wave) % s:
        raise InvalidInputError(f"length {len(wave)} not divisible by s={s}")
    if wave.sample_rate_hz % s:
        raise InvalidInputError(f"sample rate {wave.sample_rate_hz} not divisible by s={s}")
    taps = decimation_filter(s)
    half = len(taps) // 2
    if len(wave) <= half:
        raise InvalidInputError(f"waveform of {len(wave)} samples shorter than filter half-length")
    # symmetric FIR over a reflect-padded signal: zero phase, no edge droop
    padded = np.pad(wave.samples, half, mode="reflect")
    filtered = np.convolve(padded, taps, mode="valid")
    return Waveform(filtered[::s].copy(), wave.sample_rate_hz // s)


def read_wav(path, expected_rate: int | None = None) -> Waveform:
    with _wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise InvalidInputError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    if expected_rate is not None and rate != expected_rate:
        raise InvalidInputError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def write_wav(path, wave: Waveform) -> None:
    pcm = np.rint(np.clip(wave.samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def wav_info(path) -> tuple[int, int]:
    """(sample_rate_hz, num_samples) without decoding the payload."""
    with _wave.open(str(path), "rb") as fh:
        return fh.getframerate(), fh.getnframes()
