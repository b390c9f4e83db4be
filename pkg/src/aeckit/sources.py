"""Procedural speech-like and noise sources.

Real corpora are not bundled, so scenario generation draws from a pool of
synthetic "speakers": each speaker is a fixed voice profile (pitch range,
formant scaling, level) from which arbitrary amounts of syllabic,
harmonic, speech-shaped audio can be rendered.  Directories of real WAV
files can be used instead via :class:`DirectoryPool`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, active_rms, read_wav, resample

# rough (F1, F2, F3) in Hz for a handful of vowels
_VOWELS = np.array([
    (730, 1090, 2440), (270, 2290, 3010), (300, 870, 2240), (530, 1840, 2480),
    (660, 1720, 2410), (490, 1350, 1690), (640, 1190, 2390), (440, 1020, 2240),
])


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    f0_hz: float
    formant_scale: float
    level_dbfs: float
    rate_scale: float


class SpeakerPool:
    """Deterministic pool of synthetic speaker profiles."""

    def __init__(self, size: int = 1627, seed: int = 0, validation_fraction: float = 0.1):
        if size < 2:
            raise ValueError("speaker pool needs at least two speakers")
        self.size = size
        self.seed = seed
        self.n_validation = max(1, int(round(size * validation_fraction)))

    def profile(self, speaker_id: int) -> SpeakerProfile:
        rng = np.random.default_rng([self.seed, speaker_id])
        male = rng.random() < 0.7
        f0 = rng.uniform(85, 155) if male else rng.uniform(165, 255)
        return SpeakerProfile(
            speaker_id=speaker_id,
            f0_hz=float(f0),
            formant_scale=float(rng.uniform(0.92, 1.0) if male else rng.uniform(1.05, 1.18)),
            level_dbfs=float(rng.uniform(-30, -20)),
            rate_scale=float(rng.uniform(0.8, 1.25)),
        )

    def speaker_ids(self, split: str) -> range:
        """Validation speakers are disjoint from training speakers."""
        if split == "validation":
            return range(0, self.n_validation)
        return range(self.n_validation, self.size)

    def pick_two(self, rng: np.random.Generator, split: str = "train") -> tuple[int, int]:
        ids = self.speaker_ids(split)
        if len(ids) < 2:
            ids = range(self.size)
        a, b = rng.choice(len(ids), size=2, replace=False)
        return ids[int(a)], ids[int(b)]


def _formant_gain(freqs: np.ndarray, formants: np.ndarray, bw: float = 120.0) -> np.ndarray:
    g = np.zeros_like(freqs)
    for i, f in enumerate(formants):
        g += (0.6 ** i) / (1.0 + ((freqs - f) / bw) ** 2)
    return g


def speech_like(duration_s: float, sample_rate_hz: int, rng: np.random.Generator,
                speaker: SpeakerProfile) -> AudioClip:
    """Render syllabic voiced/unvoiced speech-shaped audio for one speaker."""
    n = int(round(duration_s * sample_rate_hz))
    out = np.zeros(n)
    nyq = sample_rate_hz / 2
    pos = int(rng.uniform(0.0, 0.2) * sample_rate_hz)
    while pos < n:
        syl = int(rng.uniform(0.12, 0.32) * speaker.rate_scale * sample_rate_hz)
        seg_len = min(syl, n - pos)
        if seg_len <= 8:
            break
        t = np.arange(seg_len) / sample_rate_hz
        env = np.sin(np.pi * np.arange(seg_len) / seg_len) ** 0.7
        if rng.random() < 0.8:
            formants = _VOWELS[rng.integers(len(_VOWELS))] * speaker.formant_scale
            f0 = speaker.f0_hz * rng.uniform(0.85, 1.2) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(2, 5) * t))
            phase = 2 * np.pi * np.cumsum(f0) / sample_rate_hz
            k_max = int(min(nyq * 0.9, 5000) / speaker.f0_hz)
            harmonics = np.arange(1, max(k_max, 1) + 1)
            amps = _formant_gain(harmonics * f0.mean(), formants) / np.sqrt(harmonics)
            seg = np.zeros(seg_len)
            for k, a in zip(harmonics, amps):
                seg += a * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        else:
            noise = rng.standard_normal(seg_len)
            seg = np.diff(noise, prepend=0.0) * 0.5  # fricative: high-passed noise
        seg *= env / (np.sqrt(np.mean(seg ** 2)) + 1e-12)
        out[pos:pos + seg_len] += seg * rng.uniform(0.5, 1.0)
        pos += seg_len
        if rng.random() < 0.25:
            pos += int(rng.uniform(0.05, 0.45) * sample_rate_hz)
    clip = AudioClip(out, sample_rate_hz)
    try:
        level = active_rms(clip)
    except ValueError:
        return clip
    return clip.with_samples(out * (10 ** (speaker.level_dbfs / 20) / level))


def noise_like(duration_s: float, sample_rate_hz: int, rng: np.random.Generator,
               kind: str | None = None, level_dbfs: float = -35.0) -> AudioClip:
    """Stationary coloured noise or amplitude-modulated (non-stationary) noise."""
    n = int(round(duration_s * sample_rate_hz))
    kind = kind or ("stationary" if rng.random() < 0.5 else "nonstationary")
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sample_rate_hz)
    tilt = rng.uniform(0.5, 1.5)
    spec[1:] /= (f[1:] / 100.0) ** (tilt / 2)
    spec[0] = 0
    x = np.fft.irfft(spec, n=n)
    if kind == "nonstationary":
        t = np.arange(n) / sample_rate_hz
        x *= 0.3 + np.abs(np.sin(2 * np.pi * rng.uniform(0.2, 2.0) * t + rng.uniform(0, np.pi)))
    elif kind != "stationary":
        raise ValueError(f"unknown noise kind {kind!r}")
    x *= 10 ** (level_dbfs / 20) / (np.sqrt(np.mean(x ** 2)) + 1e-20)
    return AudioClip(x, sample_rate_hz)


class DirectoryPool:
    """Speakers from a directory tree: one subdirectory per speaker, or one file per speaker."""

    def __init__(self, root, sample_rate_hz: int = 16000):
        root = Path(root)
        subdirs = sorted(p for p in root.iterdir() if p.is_dir())
        if subdirs:
            self.groups = [sorted(d.glob("*.wav")) for d in subdirs]
            self.groups = [g for g in self.groups if g]
        else:
            self.groups = [[p] for p in sorted(root.glob("*.wav"))]
        if not self.groups:
            raise ValueError(f"no WAV files under {root}")
        self.sample_rate_hz = sample_rate_hz

    def __len__(self):
        return len(self.groups)

    def load(self, index: int, rng: np.random.Generator) -> AudioClip:
        files = self.groups[index % len(self.groups)]
        clip = read_wav(files[int(rng.integers(len(files)))])
        return resample(clip, self.sample_rate_hz)
