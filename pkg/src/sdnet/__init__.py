"""Joint speech denoising and bandwidth extension (8 kHz noisy -> 16 kHz clean)."""

from .config import ModelConfig
from .dsp import HR_STFT, StftConfig, Waveform
from .model import SDNet, param_count, sdnet_forward

__version__ = "0.1.0"

__all__ = ["HR_STFT", "ModelConfig", "SDNet", "StftConfig", "Waveform", "param_count", "sdnet_forward"]
