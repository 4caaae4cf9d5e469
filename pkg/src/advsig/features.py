"""Differentiable log-mel front-end computed inside the models.

Gradients must reach the waveform, so everything here is a torch op; no
precomputed features are cached anywhere in the package.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    hop: int = 160
    n_mels: int = 40
    log_floor: float = 1e-6

    def __post_init__(self):
        if not (self.n_fft >= self.hop > 0):
            raise ConfigurationError(f"need n_fft >= hop > 0, got n_fft={self.n_fft} hop={self.hop}")
        if self.n_mels < 1:
            raise ConfigurationError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.log_floor <= 0:
            raise ConfigurationError("log_floor must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels, fmin=20.0, fmax=None):
    """Triangular HTK-style mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


class LogMel(nn.Module):
    """Waveform (B, T) -> log-mel energies (B, n_mels, frames)."""

    def __init__(self, config: FeatureConfig):
        super().__init__()
        self.config = config
        self.register_buffer("window", torch.hann_window(config.n_fft, dtype=torch.float32), persistent=False)
        fb = mel_filterbank(config.sample_rate, config.n_fft, config.n_mels)
        self.register_buffer("fbank", torch.from_numpy(fb).float(), persistent=False)

    def forward(self, wave):
        cfg = self.config
        spec = torch.stft(
            wave,
            n_fft=cfg.n_fft,
            hop_length=cfg.hop,
            window=self.window.to(wave.dtype),
            center=True,
            pad_mode="reflect",
            return_complex=True,
        )
        power = spec.real**2 + spec.imag**2
        mel = torch.matmul(self.fbank.to(wave.dtype), power)
        return torch.log(mel + cfg.log_floor)
