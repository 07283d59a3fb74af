"""
Waveform I/O, cropping and two-view chunk sampling.

Only 16 kHz, 16-bit, mono PCM WAV is supported; anything else is a hard
error rather than a silent conversion.
"""
from __future__ import annotations

import os
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .exceptions import AudioFormatError

SAMPLE_RATE = 16000
_FULL_SCALE = 32768.0

__all__ = [
    "SAMPLE_RATE",
    "Waveform",
    "ManifestEntry",
    "Manifest",
    "load_wav",
    "save_wav",
    "crop",
    "sample_disjoint_starts",
    "sample_disjoint_pair",
    "read_manifest",
    "write_manifest",
    "AudioStore",
]


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono signal with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def load_wav(path: str | os.PathLike) -> Waveform:
    """Read a 16-bit mono PCM WAV file, scaling integers by 1/32768."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: unsupported or corrupt WAV ({exc})") from exc
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {n_channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints.astype(np.float64) / _FULL_SCALE, rate)


def save_wav(w: Waveform, path: str | os.PathLike) -> None:
    """Write ``w`` as 16-bit PCM, clipping at full scale (1.0 -> 32767)."""
    ints = np.clip(np.round(w.samples * _FULL_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(ints.tobytes())


def crop(w: Waveform, start_sample: int, length: int) -> Waveform:
    """Return exactly ``length`` samples starting at ``start_sample``.

    Reads past the end wrap around, i.e. the source is tiled first.
    """
    if length <= 0:
        raise ValueError("crop length must be positive")
    if start_sample < 0:
        raise ValueError("crop start must be non-negative")
    if len(w) == 0:
        raise ValueError("cannot crop an empty waveform")
    idx = np.arange(start_sample, start_sample + length)
    return Waveform(np.take(w.samples, idx, mode="wrap"), w.sample_rate)


def sample_disjoint_starts(
    n_samples: int, chunk_len: int, rng: np.random.Generator
) -> tuple[int, int]:
    """Draw start indices for two chunks of ``chunk_len`` samples.

    When ``n_samples >= 2 * chunk_len`` the intervals never overlap: the first
    start is uniform over positions that admit a disjoint partner, the second
    uniform over the partner positions. Shorter signals get two independent
    starts (they may overlap); signals shorter than one chunk get starts in
    ``[0, n_samples)`` to be read with wrap-around.
    """
    if chunk_len <= 0:
        raise ValueError("chunk_len must be positive")
    if n_samples < chunk_len:
        return int(rng.integers(0, n_samples)), int(rng.integers(0, n_samples))
    last = n_samples - chunk_len
    if n_samples < 2 * chunk_len:
        return int(rng.integers(0, last + 1)), int(rng.integers(0, last + 1))

    # first starts with a disjoint partner: [0, last - L] U [L, last]
    low_hi = last - chunk_len
    firsts = np.union1d(np.arange(0, low_hi + 1), np.arange(chunk_len, last + 1))
    a = int(firsts[rng.integers(0, firsts.size)])
    left = np.arange(0, a - chunk_len + 1)
    right = np.arange(a + chunk_len, last + 1)
    partners = np.concatenate([left, right])
    b = int(partners[rng.integers(0, partners.size)])
    return a, b


def sample_disjoint_pair(
    w: Waveform, chunk_len: int, rng: np.random.Generator
) -> tuple[Waveform, Waveform]:
    a, b = sample_disjoint_starts(len(w), chunk_len, rng)
    return crop(w, a, chunk_len), crop(w, b, chunk_len)


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    speaker_id: str | None = None


class Manifest(list):
    """List of :class:`ManifestEntry` with unique utterance ids.

    ``root`` is the directory relative paths are resolved against.
    """

    def __init__(self, entries: Iterable[ManifestEntry] = (), root: str | os.PathLike = "."):
        super().__init__(entries)
        self.root = Path(root)
        seen = set()
        for e in self:
            if e.utterance_id in seen:
                raise ValueError(f"duplicate utterance id {e.utterance_id!r}")
            seen.add(e.utterance_id)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    @property
    def labeled(self) -> bool:
        return all(e.speaker_id is not None for e in self)


def read_manifest(path: str | os.PathLike) -> Manifest:
    """Parse ``utt_id<TAB>rel/path.wav[<TAB>speaker_id]`` lines (``#`` comments)."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        speaker = fields[2] if len(fields) == 3 and fields[2] else None
        entries.append(ManifestEntry(fields[0], fields[1], speaker))
    return Manifest(entries, root=path.parent)


def write_manifest(manifest: Iterable[ManifestEntry], path: str | os.PathLike) -> None:
    lines = []
    for e in manifest:
        fields = [e.utterance_id, e.path] + ([e.speaker_id] if e.speaker_id else [])
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class AudioStore:
    """Read-through cache of decoded waveforms keyed by resolved path."""

    def __init__(self):
        self._cache: dict[str, Waveform] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._cache)

    def __contains__(self, path) -> bool:
        return str(path) in self._cache

    def put(self, path: str | os.PathLike, w: Waveform) -> None:
        self._cache[str(path)] = w

    def get(self, path: str | os.PathLike) -> Waveform:
        key = str(path)
        w = self._cache.get(key)
        if w is None:
            self.misses += 1
            try:
                w = load_wav(key)
            except (FileNotFoundError, AudioFormatError) as exc:
                raise type(exc)(f"cannot read audio {key}: {exc}") from exc
            self._cache[key] = w
        else:
            self.hits += 1
        return w
