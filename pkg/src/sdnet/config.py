"""Model hyperparameters and their ``key = value`` text serialization."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dsp import HR_STFT, StftConfig
from .errors import InvalidInputError


@dataclass(frozen=True)
class ModelConfig:
    channel_schedule: tuple[int, ...] = (16, 32, 64, 64)
    lb_count: int = 4
    lb_channels: int = 64
    use_gconv: bool = True
    use_lbs: bool = True
    lstm_hidden: int = 64
    s: int = 2
    stft: StftConfig = field(default_factory=lambda: HR_STFT)
    ftb_channels: int = 4
    coeff_hidden: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))
        if len(self.channel_schedule) != 4:
            raise InvalidInputError(
                f"channel_schedule needs 4 entries (one per encoder depth), got {self.channel_schedule}")
        if min(self.channel_schedule) < 1 or self.lb_channels < 1 or self.lstm_hidden < 1:
            raise InvalidInputError("channel widths must be positive")
        if self.lb_count < 0:
            raise InvalidInputError(f"lb_count must be >= 0, got {self.lb_count}")
        if self.s < 1:
            raise InvalidInputError(f"upsampling factor must be >= 1, got {self.s}")
        if (self.stft.fft_bins // 2) % 16:
            raise InvalidInputError(
                f"fft_bins/2 = {self.stft.fft_bins // 2} must be divisible by 16 for four stride-2 stages")

    @property
    def freq_bins(self) -> int:
        """Frequency extent seen by the encoder (Nyquist bin set aside)."""
        return self.stft.fft_bins // 2

    @classmethod
    def reference(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(channel_schedule=(4, 8, 8, 8), lb_channels=8, lstm_hidden=8,
                    ftb_channels=2, coeff_hidden=4)
        base.update(overrides)
        return cls(**base)

    def with_ablation(self, use_gconv: bool, use_lbs: bool) -> "ModelConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(use_gconv=use_gconv, use_lbs=use_lbs)
        return ModelConfig(**d)

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        model = {k: v for k, v in asdict(self).items() if k != "stft"}
        model["channel_schedule"] = ", ".join(str(c) for c in self.channel_schedule)
        cp["model"] = {k: str(v) for k, v in model.items()}
        cp["stft"] = {k: str(v) for k, v in asdict(self.stft).items()}
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "model" not in cp:
            raise InvalidInputError("model config lacks a [model] section")
        m = cp["model"]
        known = {f.name for f in fields(cls)} - {"stft"}
        unknown = set(m) - known
        if unknown:
            raise InvalidInputError(f"unknown model config keys: {sorted(unknown)}")
        kw = {}
        for key in m:
            if key == "channel_schedule":
                kw[key] = tuple(int(c) for c in m[key].split(","))
            elif key in ("use_gconv", "use_lbs"):
                kw[key] = m.getboolean(key)
            else:
                kw[key] = m.getint(key)
        if "stft" in cp:
            st = cp["stft"]
            kw["stft"] = StftConfig(st.getint("fft_bins"), st.getint("window_len"), st.getint("hop_len"),
                                    st.get("window", "hann"), st.getboolean("centered", True))
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())
