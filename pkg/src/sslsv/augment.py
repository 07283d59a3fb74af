"""
Additive-noise and reverberation augmentation.

Noise sources are grouped into ``speech``, ``music`` and ``noise`` categories,
each with its own SNR range. Noise is mixed first, reverberation applied
after.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import Waveform, crop, load_wav

DEFAULT_SNR_RANGES = {
    "speech": (13.0, 20.0),
    "music": (5.0, 15.0),
    "noise": (0.0, 15.0),
}

__all__ = [
    "DEFAULT_SNR_RANGES",
    "NoiseCategory",
    "NoiseCorpus",
    "RirCorpus",
    "AugmentPolicy",
    "power",
    "snr_gain",
    "fit_length",
    "mix_at_snr",
    "reverberate",
    "apply_policy",
]


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


@dataclass
class NoiseCategory:
    sources: list[Waveform]
    snr_range: tuple[float, float]
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        lo, hi = self.snr_range
        if lo > hi:
            raise ValueError(f"invalid SNR range {self.snr_range}")


@dataclass
class NoiseCorpus:
    categories: dict[str, NoiseCategory]

    @classmethod
    def from_directory(cls, root: str | os.PathLike, snr_ranges=None) -> "NoiseCorpus":
        """Load ``root/{speech,music,noise}/**/*.wav``; missing subdirs are empty."""
        snr_ranges = dict(DEFAULT_SNR_RANGES, **(snr_ranges or {}))
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"noise corpus directory not found: {root}")
        categories = {}
        for name, rng in snr_ranges.items():
            paths = sorted((root / name).rglob("*.wav")) if (root / name).is_dir() else []
            categories[name] = NoiseCategory(
                [load_wav(p) for p in paths], rng, [str(p) for p in paths]
            )
        return cls(categories)

    def nonempty(self) -> list[str]:
        return [name for name, cat in self.categories.items() if cat.sources]


@dataclass
class RirCorpus:
    sources: list[Waveform]
    paths: list[str] = field(default_factory=list)

    @classmethod
    def from_directory(cls, root: str | os.PathLike) -> "RirCorpus":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"RIR directory not found: {root}")
        paths = sorted(root.rglob("*.wav"))
        return cls([load_wav(p) for p in paths], [str(p) for p in paths])


@dataclass
class AugmentPolicy:
    """How each view is distorted. Probabilities apply independently per view."""

    noise: NoiseCorpus | None = None
    rir: RirCorpus | None = None
    p_noise: float = 0.75
    p_reverb: float = 0.5

    def __post_init__(self):
        for name in ("p_noise", "p_reverb"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


def snr_gain(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Gain ``g`` such that ``10 log10(P(clean) / P(g * noise)) == snr_db``."""
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0.0:
        raise ValueError("clean signal has zero power; SNR undefined")
    if p_noise == 0.0:
        raise ValueError("noise signal has zero power")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def fit_length(noise: Waveform, length: int, rng: np.random.Generator | None = None) -> Waveform:
    """Tile a short noise, or randomly crop a long one (prefix when ``rng`` is None)."""
    if len(noise) <= length:
        return crop(noise, 0, length)
    start = 0 if rng is None else int(rng.integers(0, len(noise) - length + 1))
    return crop(noise, start, length)


def mix_at_snr(
    clean: Waveform,
    noise: Waveform,
    snr_db: float,
    rng: np.random.Generator | None = None,
    trace: dict | None = None,
) -> Waveform:
    """Add ``noise`` to ``clean`` at ``snr_db``, peak-normalizing only on overflow."""
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("sample rates differ")
    noise = fit_length(noise, len(clean), rng)
    g = snr_gain(clean.samples, noise.samples, snr_db)
    out = clean.samples + g * noise.samples
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    if trace is not None:
        trace.update(gain=g, snr_db=snr_db, noise=noise.samples)
    return Waveform(out, clean.sample_rate)


def reverberate(x: Waveform, rir: Waveform) -> Waveform:
    """Convolve with ``rir``, aligned on its direct path, and restore the input peak.

    The output is the full convolution sliced to ``len(x)`` samples starting
    at the index of the RIR's largest absolute value, then rescaled so its
    max-abs equals that of ``x``.
    """
    if x.sample_rate != rir.sample_rate:
        raise ValueError("sample rates differ")
    h = rir.samples
    if h.size == 0 or not np.any(h):
        raise ValueError("impulse response is empty or all zero")
    n = len(x)
    if n == 0:
        return x
    full = fftconvolve(x.samples, h)
    offset = int(np.argmax(np.abs(h)))
    out = full[offset : offset + n]
    peak_in = np.max(np.abs(x.samples))
    peak_out = np.max(np.abs(out))
    if peak_out > 0.0:
        out = out * (peak_in / peak_out)
    return Waveform(out, x.sample_rate)


def apply_policy(
    x: Waveform,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    trace: dict | None = None,
) -> Waveform:
    """Randomly add one noise source, then randomly reverberate.

    Draw order is fixed so identical streams give bit-identical output:
    noise coin, category, file, SNR, crop offset, reverb coin, RIR.
    """
    if rng.random() < policy.p_noise:
        corpus = policy.noise
        names = corpus.nonempty() if corpus is not None else []
        if not names:
            raise ValueError("noise branch fired but the noise corpus is empty")
        name = names[int(rng.integers(0, len(names)))]
        cat = corpus.categories[name]
        idx = int(rng.integers(0, len(cat.sources)))
        snr = float(rng.uniform(*cat.snr_range))
        info = {} if trace is not None else None
        x = mix_at_snr(x, cat.sources[idx], snr, rng, trace=info)
        if trace is not None:
            trace.update(info, category=name, source=idx)
    if rng.random() < policy.p_reverb:
        if policy.rir is None or not policy.rir.sources:
            raise ValueError("reverb branch fired but the RIR corpus is empty")
        idx = int(rng.integers(0, len(policy.rir.sources)))
        x = reverberate(x, policy.rir.sources[idx])
        if trace is not None:
            trace["rir"] = idx
    return x
