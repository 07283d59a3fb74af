"""Log-mel features with per-utterance mean/variance normalization."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import Waveform

__all__ = [
    "SpectrogramConfig",
    "FeatureMatrix",
    "hz_to_mel",
    "mel_to_hz",
    "num_frames",
    "stft_power",
    "mel_filterbank",
    "log_mel",
    "instance_mvn",
    "extract_features",
]


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 16000
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    n_mels: int = 40
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ValueError("win_length must not exceed n_fft")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.n_mels < 1 or self.hop_length < 1:
            raise ValueError("n_mels and hop_length must be positive")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """``values`` is frames x mel bins."""

    values: np.ndarray
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def num_frames(n_samples: int, cfg: SpectrogramConfig) -> int:
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def stft_power(w: Waveform | np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Power spectrogram, frames x (n_fft // 2 + 1).

    Frame ``t`` covers samples ``[t * hop, t * hop + win)``; no centering
    or padding of the signal, Hamming window, frame zero-padded to n_fft.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.shape[0] < cfg.win_length:
        raise ValueError(f"signal of {x.shape[0]} samples is shorter than one window")
    frames = sliding_window_view(x, cfg.win_length)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * _hamming(cfg.win_length), n=cfg.n_fft, axis=-1)
    return spec.real**2 + spec.imag**2


@lru_cache(maxsize=8)
def _hamming(n: int) -> np.ndarray:
    # symmetric form 0.54 - 0.46 cos(2 pi k / (n - 1))
    return np.hamming(n)


@lru_cache(maxsize=8)
def _filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) == 0.0)
    if empty.size:
        raise ValueError(
            f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}: filters {empty.tolist()} are empty"
        )
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Triangular HTK-mel filters, n_mels x (n_fft // 2 + 1), ascending centers.

    The returned array is shared and read-only.
    """
    return _filterbank(cfg)


def log_mel(w: Waveform | np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> FeatureMatrix:
    power = stft_power(w, cfg)
    return FeatureMatrix(np.log(power @ mel_filterbank(cfg).T + cfg.log_floor), normalized=False)


def instance_mvn(f: FeatureMatrix, eps: float = 1e-8) -> FeatureMatrix:
    """Standardize each mel bin over time (population std, ``eps`` in the denominator)."""
    x = f.values
    if x.shape[0] < 2:
        raise ValueError("instance MVN needs at least two frames")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return FeatureMatrix((x - mean) / (std + eps), normalized=True)


def extract_features(w: Waveform | np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Network input for one chunk: normalized log-mel values (frames x n_mels)."""
    return instance_mvn(log_mel(w, cfg)).values
