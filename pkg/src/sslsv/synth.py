"""
Deterministic synthetic speakers, noise sources and room impulse responses.

A speaker is a fixed fundamental frequency plus three formant-like
resonances shaping its harmonic amplitudes. Each utterance is a train of
syllables (short voiced segments with slight pitch movement) plus white
noise at 20 dB SNR. Utterances also carry a per-recording channel (a
colored background noise and, sometimes, a room response) shared by every
chunk of that recording, which is what augmentation must teach the model
to ignore.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import SAMPLE_RATE, Manifest, ManifestEntry, Waveform, save_wav, write_manifest
from .augment import snr_gain
from .eval import Trial, TrialList, write_trials

__all__ = [
    "SpeakerProfile",
    "speaker_profile",
    "synth_utterance",
    "colored_noise",
    "music_clip",
    "synth_rir",
    "SynthCorpus",
    "make_corpus",
]

SR = SAMPLE_RATE


@dataclass(frozen=True)
class SpeakerProfile:
    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    gains: tuple[float, float, float]


def speaker_profile(seed: int, index: int) -> SpeakerProfile:
    rng = np.random.default_rng([seed, 1, index])
    f0 = float(np.exp(rng.uniform(np.log(90.0), np.log(260.0))))
    formants = (rng.uniform(300, 900), rng.uniform(900, 2400), rng.uniform(2400, 3800))
    bandwidths = tuple(rng.uniform(60, 220, size=3))
    gains = (1.0, float(rng.uniform(0.4, 1.0)), float(rng.uniform(0.2, 0.7)))
    return SpeakerProfile(f0, tuple(float(f) for f in formants), bandwidths, gains)


def _harmonic_amplitudes(freqs, profile: SpeakerProfile, shift: float = 1.0):
    amp = np.full_like(freqs, 0.02)
    for f, b, g in zip(profile.formants, profile.bandwidths, profile.gains):
        amp += g / (1.0 + ((freqs - f * shift) / b) ** 2)
    return amp


def _voiced(profile: SpeakerProfile, n: int, rng) -> np.ndarray:
    """One syllable: harmonics of a gently moving f0 under a raised-cosine envelope."""
    t = np.arange(n) / SR
    start, end = profile.f0 * (1 + 0.05 * rng.uniform(-1, 1, size=2))
    f0 = start + (end - start) * t / t[-1]
    phase = 2 * np.pi * np.cumsum(f0) / SR
    n_harm = int(5000 // profile.f0)
    h = np.arange(1, n_harm + 1)
    amps = _harmonic_amplitudes(h * profile.f0, profile, shift=1.0 + 0.03 * rng.uniform(-1, 1))
    x = np.sin(np.outer(phase, h) + rng.uniform(0, 2 * np.pi, n_harm)) @ amps
    return x * np.hanning(n)


def colored_noise(n: int, rng, n_bands: int = 8) -> np.ndarray:
    """White noise shaped by a random smooth (piecewise log-linear) magnitude response."""
    spec = np.fft.rfft(rng.normal(size=n))
    freqs = np.linspace(0, SR / 2, spec.size)
    knots = np.linspace(0, SR / 2, n_bands)
    gains_db = rng.uniform(-30, 0, size=n_bands)
    spec *= 10 ** (np.interp(freqs, knots, gains_db) / 20)
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x**2))


def synth_rir(rng, max_seconds: float = 0.5) -> np.ndarray:
    """Exponentially decaying noise tail after a unit direct path."""
    rt60 = rng.uniform(0.15, max_seconds)
    n = int(rt60 * SR)
    t = np.arange(n) / SR
    tail = rng.normal(size=n) * np.exp(-6.9 * t / rt60) * rng.uniform(0.2, 0.6)
    delay = int(rng.integers(0, 40))
    h = np.zeros(n + delay)
    h[delay] = 1.0
    h[delay + 1 :] += tail[: n - 1]
    return h


def music_clip(n: int, rng) -> np.ndarray:
    """Sequence of random chords of decaying harmonic tones."""
    x = np.zeros(n)
    pos = 0
    while pos < n:
        length = min(int(rng.uniform(0.3, 1.0) * SR), n - pos)
        t = np.arange(length) / SR
        for _ in range(3):
            f = 110.0 * 2 ** (rng.integers(0, 36) / 12)
            partials = np.arange(1, 6)
            tone = np.sin(2 * np.pi * f * np.outer(t, partials)) @ (1.0 / partials)
            x[pos : pos + length] += tone * np.exp(-t * rng.uniform(1, 4))
        pos += length
    return x


def _normalize(x, peak=0.9):
    return x * (peak / np.max(np.abs(x)))


def synth_utterance(
    profile: SpeakerProfile,
    rng: np.random.Generator,
    duration: float,
    channel: bool = True,
) -> np.ndarray:
    n = int(duration * SR)
    x = np.zeros(n)
    pos = int(rng.uniform(0.02, 0.15) * SR)
    while pos < n:
        length = int(rng.uniform(0.12, 0.35) * SR)
        seg = _voiced(profile, length, rng) * rng.uniform(0.5, 1.0)
        end = min(pos + length, n)
        x[pos:end] += seg[: end - pos]
        pos = end + int(rng.uniform(0.04, 0.2) * SR)
    x += snr_gain(x, w := rng.normal(size=n), 20.0) * w
    if channel:
        bg = colored_noise(n, rng)
        x += snr_gain(x, bg, rng.uniform(3.0, 12.0)) * bg
        if rng.random() < 0.5:
            x = fftconvolve(x, synth_rir(rng))[:n]
    return _normalize(x)


@dataclass
class SynthCorpus:
    root: Path
    train: Manifest
    test: Manifest
    trials: TrialList
    noise_dir: Path
    rir_dir: Path


def _trial_list(test: Manifest, n_trials: int, rng) -> list[Trial]:
    speakers = np.array([e.speaker_id for e in test])
    trials = []
    for i in range(n_trials):
        a = int(rng.integers(len(test)))
        same = np.flatnonzero((speakers == speakers[a]) & (np.arange(len(test)) != a))
        diff = np.flatnonzero(speakers != speakers[a])
        target = i % 2 == 0
        b = int(rng.choice(same if target else diff))
        trials.append(Trial(int(target), test[a].path, test[b].path))
    return trials


def make_corpus(
    out: str | os.PathLike,
    speakers: int = 10,
    utts_per_speaker: int = 20,
    test_utts_per_speaker: int = 4,
    n_trials: int = 200,
    seed: int = 7,
    min_seconds: float = 4.5,
    max_seconds: float = 6.0,
    n_noise: int = 12,
    n_rirs: int = 10,
    channel: bool = True,
) -> SynthCorpus:
    """Write a corpus, augmentation sources, manifests and a trial list under ``out``.

    Layout::

        train/spkXX_uttYYY.wav  train.tsv
        test/spkXX_uttYYY.wav   test.tsv  trials.txt
        noise/{speech,music,noise}/*.wav   rirs/*.wav

    Test utterances are held out (different recordings of the same speakers).
    Augmentation sources come from independent streams and separate speakers.
    """
    root = Path(out)
    for sub in ("train", "test", "noise/speech", "noise/music", "noise/noise", "rirs"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    manifests = {}
    for split, count, tag in (("train", utts_per_speaker, 2), ("test", test_utts_per_speaker, 3)):
        entries = []
        for k in range(speakers):
            profile = speaker_profile(seed, k)
            for u in range(count):
                rng = np.random.default_rng([seed, tag, k, u])
                x = synth_utterance(profile, rng, rng.uniform(min_seconds, max_seconds), channel)
                rel = f"{split}/spk{k:02d}_utt{u:03d}.wav"
                save_wav(Waveform(x), root / rel)
                entries.append(ManifestEntry(f"spk{k:02d}_{split}{u:03d}", rel, f"spk{k:02d}"))
        manifests[split] = Manifest(entries, root=root)
        write_manifest(entries, root / f"{split}.tsv")

    for i in range(n_noise):
        rng = np.random.default_rng([seed, 4, i])
        n = int(rng.uniform(3.0, 6.0) * SR)
        babble = sum(
            synth_utterance(speaker_profile(seed + 1000, 3 * i + j), rng, n / SR, channel=False)
            for j in range(int(rng.integers(1, 4)))
        )
        save_wav(Waveform(_normalize(babble)), root / f"noise/speech/babble{i:02d}.wav")
        save_wav(Waveform(_normalize(music_clip(n, rng))), root / f"noise/music/music{i:02d}.wav")
        save_wav(Waveform(_normalize(colored_noise(n, rng))), root / f"noise/noise/noise{i:02d}.wav")
    for i in range(n_rirs):
        rng = np.random.default_rng([seed, 5, i])
        save_wav(Waveform(_normalize(synth_rir(rng, 0.6), 0.99)), root / f"rirs/rir{i:02d}.wav")

    trials = TrialList(_trial_list(manifests["test"], n_trials, np.random.default_rng([seed, 6])), root=root)
    write_trials(trials, root / "trials.txt")
    return SynthCorpus(root, manifests["train"], manifests["test"], trials, root / "noise", root / "rirs")
