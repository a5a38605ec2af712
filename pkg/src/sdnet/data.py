"""Synthesis of (low-rate noisy, high-rate clean) training pairs and their manifests."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import Waveform, read_wav, resample_down, wav_info
from .errors import InvalidInputError

SNR_RANGE_DB = (-5.0, 20.0)
CLIP_DURATION_S = 5.0
HR_RATE = 16000
PEAK_LIMIT = 0.95
VALID_FRACTION = 0.1


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


@dataclass
class Mixture:
    wave: Waveform
    clean: np.ndarray
    scaled_noise: np.ndarray
    noise_gain: float
    peak_scale: float = 1.0


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Mixture:
    """clean + g*noise with g set so the clean-to-noise RMS ratio is ``snr_db``.

    If the sum would exceed +-1 the whole mixture (and the returned clean
    component) is scaled to peak at 0.95; ``peak_scale`` records the factor.
    """
    if len(clean) != len(noise):
        raise InvalidInputError(f"clean ({len(clean)}) and noise ({len(noise)}) lengths differ")
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise InvalidInputError(
            f"clean at {clean.sample_rate_hz} Hz, noise at {noise.sample_rate_hz} Hz")
    rc, rn = rms(clean.samples), rms(noise.samples)
    if rc == 0.0:
        raise InvalidInputError("clean signal is silent; SNR undefined")
    if rn == 0.0:
        raise InvalidInputError("noise signal is silent; SNR undefined")
    gain = (rc / rn) * 10.0 ** (-snr_db / 20.0)
    scaled_noise = gain * noise.samples
    mixed = clean.samples + scaled_noise
    peak = float(np.max(np.abs(mixed)))
    scale = PEAK_LIMIT / peak if peak > 1.0 else 1.0
    return Mixture(Waveform(mixed * scale, clean.sample_rate_hz), clean.samples * scale,
                   scaled_noise * scale, gain, scale)


def measured_snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return 20.0 * math.log10(rms(clean) / rms(noise))


@dataclass
class ManifestRecord:
    clean_path: str
    noise_path: str
    clean_offset_samples: int
    noise_offset_samples: int
    snr_db: float
    seed: int
    duration_s: float = CLIP_DURATION_S


@dataclass
class TrainingPair:
    lr_noisy: Waveform
    hr_clean: Waveform
    meta: dict = field(default_factory=dict)


def make_pair(clean: Waveform, noise: Waveform, snr_db: float, s: int = 2, meta: dict | None = None) -> TrainingPair:
    mix = mix_at_snr(clean, noise, snr_db)
    lr = resample_down(mix.wave, s)
    info = dict(meta or {})
    info.update(snr_db=snr_db, noise_gain=mix.noise_gain, peak_scale=mix.peak_scale)
    return TrainingPair(lr, Waveform(mix.clean, clean.sample_rate_hz), info)


def _segment(path, offset: int, length: int) -> Waveform:
    wave = read_wav(path, expected_rate=HR_RATE)
    if offset < 0 or offset + length > len(wave):
        raise InvalidInputError(f"{path}: segment [{offset}, {offset + length}) outside {len(wave)} samples")
    return Waveform(wave.samples[offset:offset + length], wave.sample_rate_hz)


def pair_from_record(rec: ManifestRecord, s: int = 2) -> TrainingPair:
    n = int(round(rec.duration_s * HR_RATE))
    clean = _segment(rec.clean_path, rec.clean_offset_samples, n)
    noise = _segment(rec.noise_path, rec.noise_offset_samples, n)
    return make_pair(clean, noise, rec.snr_db, s, meta=asdict(rec))


@dataclass
class PairManifest:
    train: list[ManifestRecord]
    valid: list[ManifestRecord]

    def __len__(self):
        return len(self.train) + len(self.valid)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_records(out / "train.jsonl", self.train)
        write_records(out / "valid.jsonl", self.valid)

    @classmethod
    def load(cls, out_dir) -> "PairManifest":
        out = Path(out_dir)
        return cls(read_records(out / "train.jsonl"), read_records(out / "valid.jsonl"))


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_records(path) -> list[ManifestRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ManifestRecord(**json.loads(line)) for line in fh if line.strip()]


def _usable_files(directory, min_samples: int, label: str):
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"{label} directory {directory} does not exist")
    files = []
    for p in sorted(directory.rglob("*.wav")):
        rate, n = wav_info(p)
        if rate != HR_RATE:
            raise InvalidInputError(f"{p}: sample rate {rate} Hz, expected {HR_RATE} Hz")
        if n >= min_samples:
            files.append((str(p), n))
    if not files:
        raise InvalidInputError(
            f"{label} directory {directory} has no 16 kHz WAV files of at least {min_samples} samples")
    return files


def build_manifest(clean_dir, noise_dir, hours: float, seed: int,
                   duration_s: float = CLIP_DURATION_S) -> PairManifest:
    """Random clean/noise pairing with uniform SNR, split 90/10 into train/valid."""
    n_samples = int(round(duration_s * HR_RATE))
    n_records = int(math.floor(hours * 3600.0 / duration_s + 1e-9))
    if n_records < 1:
        raise InvalidInputError(f"{hours} h yields no {duration_s} s clips")
    clean_files = _usable_files(clean_dir, n_samples, "clean")
    noise_files = _usable_files(noise_dir, n_samples, "noise")
    have = sum(n for _, n in clean_files) / HR_RATE
    need = n_records * duration_s
    if have < need:
        raise InvalidInputError(
            f"insufficient clean speech: need {need:.1f} s for {n_records} clips, have {have:.1f} s "
            f"(short by {need - have:.1f} s)")
    rng = np.random.default_rng(seed)
    records = []
    for rec_seed in rng.integers(0, 2 ** 31 - 1, size=n_records):
        r = np.random.default_rng(int(rec_seed))
        cpath, clen = clean_files[r.integers(len(clean_files))]
        npath, nlen = noise_files[r.integers(len(noise_files))]
        records.append(ManifestRecord(
            clean_path=cpath, noise_path=npath,
            clean_offset_samples=int(r.integers(0, clen - n_samples + 1)),
            noise_offset_samples=int(r.integers(0, nlen - n_samples + 1)),
            snr_db=float(r.uniform(*SNR_RANGE_DB)), seed=int(rec_seed), duration_s=duration_s))
    n_valid = int(math.floor(VALID_FRACTION * n_records + 0.5))
    valid_idx = set(rng.permutation(n_records)[:n_valid].tolist())
    return PairManifest([r for i, r in enumerate(records) if i not in valid_idx],
                        [r for i, r in enumerate(records) if i in valid_idx])


def _syllable_envelope(m: int) -> np.ndarray:
    return np.sin(np.pi * np.linspace(0, 1, m)) ** 0.6


def _resonator(x: np.ndarray, fc: float, r: float, sr: int) -> np.ndarray:
    return lfilter([1 - r], [1, -2 * r * math.cos(2 * math.pi * fc / sr), r * r], x)


def synth_speech(seed: int, duration_s: float = 1.0, sample_rate_hz: int = HR_RATE,
                 peak: float = 0.5, floor_db: float = -50.0) -> Waveform:
    """Deterministic speech-like test signal with peak about ``peak``.

    Back-to-back voiced syllables (glottal pulse train plus aspiration noise,
    drifting pitch, three formant resonators). Half the syllables open with a
    4-7 kHz fricative burst, which supplies the high-band content. A white
    floor ``floor_db`` below the peak stands in for a recording's noise floor;
    without it harmonic valleys sit near 1e-7 and dominate any log-spectral
    comparison.
    """
    rng = np.random.default_rng(seed)
    sr = sample_rate_hz
    n = int(round(duration_s * sr))
    if n < 1:
        raise InvalidInputError(f"duration {duration_s} s gives no samples")
    out = np.zeros(n)
    t = 0
    while t < n:
        m = min(n, t + int(rng.uniform(0.1, 0.28) * sr)) - t
        f0 = rng.uniform(95, 230) * (1 + 0.15 * np.linspace(-1, 1, m) * rng.choice([-1, 1]))
        x = np.diff(np.floor(np.cumsum(f0 / sr)), prepend=0.0) + 0.03 * rng.standard_normal(m)
        for fc, bw in zip(rng.uniform([300, 900, 2200], [800, 2000, 3400]), (80, 120, 180)):
            x = _resonator(x, fc, math.exp(-math.pi * bw / sr), sr)
        x = x * _syllable_envelope(m)
        x /= max(rms(x), 1e-12)
        if rng.random() < 0.5 and m >= 48:
            k = m // 3
            burst = _resonator(rng.standard_normal(k), min(rng.uniform(4000, 7000), 0.45 * sr), 0.85, sr)
            x[:k] += 1.5 * burst / rms(burst) * np.hanning(k)
        out[t:t + m] = x
        t += m
    top = np.max(np.abs(out))
    if top == 0:
        # only reachable for sub-millisecond durations
        out[0], top = 1.0, 1.0
    out = peak * out / top + peak * 10.0 ** (floor_db / 20.0) * rng.standard_normal(n)
    return Waveform(out, sr)


def synth_noise(seed: int, duration_s: float = 1.0, sample_rate_hz: int = HR_RATE) -> Waveform:
    """Coloured noise with a random spectral tilt and a weak mains-hum component."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    white = rng.standard_normal(n)
    pole = rng.uniform(0.0, 0.95)
    x = lfilter([1.0], [1.0, -pole], white)
    hum = 0.3 * np.sin(2 * np.pi * rng.choice([50.0, 60.0]) * np.arange(n) / sample_rate_hz)
    x = x / rms(x) + hum
    return Waveform(0.05 * x / rms(x), sample_rate_hz)
