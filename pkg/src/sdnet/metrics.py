"""Objective quality metrics: STOI, log-spectral distance, SI-SDR, SNR."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
from scipy.signal import resample_poly

from .dsp import StftConfig, Waveform, stft_tensor
from .errors import InvalidInputError

DB_CAP = 100.0

# STOI constants (Taal et al. 2011)
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps

LSD_STFT = StftConfig(2048, 2048, 512)
LSD_POWER_FLOOR = 1e-10


def _samples(x):
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _check_pair(est, ref):
    e, r = _samples(est), _samples(ref)
    if e.shape != r.shape:
        raise InvalidInputError(f"estimate has {e.shape[0]} samples, reference {r.shape[0]}")
    return e, r


def _cap(db: float) -> float:
    return float(np.clip(db, -DB_CAP, DB_CAP))


def snr(est, ref) -> float:
    e, r = _check_pair(est, ref)
    err = np.sum((r - e) ** 2)
    if err == 0:
        return DB_CAP
    return _cap(10 * math.log10(np.sum(r ** 2) / err)) if np.sum(r ** 2) > 0 else -DB_CAP


def si_sdr(est, ref) -> float:
    e, r = _check_pair(est, ref)
    ref_energy = np.dot(r, r)
    if ref_energy == 0:
        raise InvalidInputError("SI-SDR undefined for an all-zero reference")
    target = (np.dot(e, r) / ref_energy) * r
    resid = e - target
    num, den = np.dot(target, target), np.dot(resid, resid)
    if den == 0:
        return DB_CAP
    if num == 0:
        return -DB_CAP
    return _cap(10 * math.log10(num / den))


def lsd(est, ref, stft_cfg: StftConfig = LSD_STFT) -> float:
    """Mean over frames of the RMS (over bins) log-power difference, in dB."""
    e, r = _check_pair(est, ref)
    specs = stft_tensor(torch.from_numpy(np.stack([r, e])), stft_cfg).numpy()
    power = np.maximum(specs[:, 0] ** 2 + specs[:, 1] ** 2, LSD_POWER_FLOOR)
    diff = np.log10(power[0]) - np.log10(power[1])
    return float(np.mean(np.sqrt(np.mean(diff ** 2 * 100.0, axis=0))))


@lru_cache(maxsize=4)
def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, num_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary [bands, nfft/2+1] matrix summing FFT-bin powers into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands)
    cf = min_freq * 2.0 ** (k / 3.0)
    lo = np.argmin(np.abs(f[None, :] - (cf * 2.0 ** (-1 / 6))[:, None]), axis=1)
    hi = np.argmin(np.abs(f[None, :] - (cf * 2.0 ** (1 / 6))[:, None]), axis=1)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        obm[i, lo[i]:hi[i]] = 1.0
    return obm


def _frames(x, frame, hop):
    count = (len(x) - frame) // hop + 1
    idx = np.arange(frame)[None, :] + hop * np.arange(max(count, 0))[:, None]
    return x[idx]


def _stoi_window():
    return np.hanning(STOI_FRAME + 2)[1:-1]


def remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE_DB, frame=STOI_FRAME, hop=STOI_FRAME // 2):
    """Drop frames of both signals where ``x`` is more than ``dyn_range`` dB below its loudest frame."""
    w = _stoi_window()
    xf, yf = _frames(x, frame, hop) * w, _frames(y, frame, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    out_len = (n - 1) * hop + frame if n else 0
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for i in range(n):
        xs[i * hop:i * hop + frame] += xf[i]
        ys[i * hop:i * hop + frame] += yf[i]
    return xs, ys


def _band_envelopes(x):
    frames = _frames(x, STOI_FRAME, STOI_FRAME // 2) * _stoi_window()
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    return np.sqrt(third_octave_matrix() @ (np.abs(spec) ** 2).T)


def stoi(est, ref, sample_rate_hz: int | None = None) -> float:
    """Short-time objective intelligibility of ``est`` against clean ``ref``, in [0, 1]."""
    e, r = _check_pair(est, ref)
    fs = sample_rate_hz or (ref.sample_rate_hz if isinstance(ref, Waveform) else None)
    if fs is None:
        raise InvalidInputError("sample rate required for STOI")
    if fs < STOI_FS:
        raise InvalidInputError(f"STOI needs at least {STOI_FS} Hz input, got {fs}")
    if not np.any(r):
        raise InvalidInputError("STOI undefined for an all-silent reference")
    if fs != STOI_FS:
        g = math.gcd(fs, STOI_FS)
        r = resample_poly(r, STOI_FS // g, fs // g)
        e = resample_poly(e, STOI_FS // g, fs // g)
    r, e = remove_silent_frames(r, e)
    x_tob, y_tob = _band_envelopes(r), _band_envelopes(e)
    n_seg = x_tob.shape[1] - STOI_SEGMENT + 1
    if n_seg < 1:
        raise InvalidInputError(
            f"not enough speech frames for STOI ({x_tob.shape[1]} < {STOI_SEGMENT}); signal too short")
    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n_seg)[:, None]
    xs = x_tob[:, idx].transpose(1, 0, 2)  # [segments, bands, N]
    ys = y_tob[:, idx].transpose(1, 0, 2)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    clip = 10 ** (-STOI_BETA_DB / 20)
    y_prime = np.minimum(ys * alpha, xs * (1 + clip))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = y_prime - y_prime.mean(axis=2, keepdims=True)
    corr = np.sum(xc * yc, axis=2) / (np.linalg.norm(xc, axis=2) * np.linalg.norm(yc, axis=2) + _EPS)
    return float(np.clip(np.mean(corr), 0.0, 1.0))


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)

    keys = ("stoi", "lsd_db", "si_sdr_db", "snr_db")

    def add(self, name: str, est: Waveform, ref: Waveform) -> dict:
        row = {"file": name, "stoi": stoi(est, ref), "lsd_db": lsd(est, ref),
               "si_sdr_db": si_sdr(est, ref), "snr_db": snr(est, ref)}
        self.rows.append(row)
        return row

    def mean(self) -> dict:
        if not self.rows:
            return {k: float("nan") for k in self.keys}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in self.keys}
