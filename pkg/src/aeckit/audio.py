"""Sample-domain and time-frequency primitives.

Everything downstream passes audio around as :class:`AudioClip`, a mono
float64 buffer tagged with its sample rate.  The STFT uses a square-root
periodic Hann window for both analysis and synthesis, so plain overlap-add
reconstructs the input exactly at 50% overlap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd

import numpy as np
import scipy.signal

SUPPORTED_RATES = (16000, 48000)
PROCESSING_RATE = 16000


class WavError(ValueError):
    """Raised for unreadable or unsupported WAV files."""


class NoActiveFramesError(ValueError):
    """Raised when a clip has no frames above the activity threshold."""


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return (self.sample_rate_hz == other.sample_rate_hz
                and np.array_equal(self.samples, other.samples))

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def with_samples(self, samples) -> "AudioClip":
        return AudioClip(samples, self.sample_rate_hz)

    def segment(self, start_s: float, end_s: float) -> "AudioClip":
        a = int(round(start_s * self.sample_rate_hz))
        b = int(round(end_s * self.sample_rate_hz))
        return self.with_samples(self.samples[max(a, 0):max(b, 0)])

    @classmethod
    def silence(cls, duration_s: float, sample_rate_hz: int) -> "AudioClip":
        return cls(np.zeros(int(round(duration_s * sample_rate_hz))), sample_rate_hz)


# --------------------------------------------------------------------------
# WAV I/O


_PCM, _IEEE_FLOAT, _EXTENSIBLE = 0x0001, 0x0003, 0xFFFE


def _parse_riff(raw: bytes, path) -> tuple[int, np.ndarray]:
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    fmt = data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError(f"{path}: short fmt chunk")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == _EXTENSIBLE and len(body) >= 26:
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            data = body
            if len(body) < size:
                data = body[:len(body) - len(body) % 4]  # tolerate truncated data chunk
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise WavError(f"{path}: bad channel count or sample rate")
    if tag == _PCM and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise WavError(f"{path}: unsupported codec (format tag {tag:#x}, {bits} bits); need PCM16 or float32")
    frame = channels * bits // 8
    n = len(data) // frame
    x = np.frombuffer(data[:n * frame], dtype=dtype).reshape(n, channels).astype(np.float64) * scale
    return rate, x


def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file, downmixing to mono by averaging."""
    with open(path, "rb") as f:
        raw = f.read()
    rate, x = _parse_riff(raw, path)
    if x.shape[0] == 0:
        raise WavError(f"{path}: zero-length audio")
    return AudioClip(x.mean(axis=1) if x.shape[1] > 1 else x[:, 0], rate)


def write_wav(clip: AudioClip, path, format: str = "float32") -> None:
    if format == "float32":
        data, tag, bits = clip.samples.astype("<f4"), _IEEE_FLOAT, 32
    elif format == "pcm16":
        # +1.0 saturates at 32767
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
        tag, bits = _PCM, 16
    else:
        raise ValueError(f"unknown WAV format {format!r}")
    payload = data.tobytes()
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate_hz, clip.sample_rate_hz * block, block, bits)
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload)) + b"WAVE")
        f.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        f.write(b"data" + struct.pack("<I", len(payload)) + payload)


# --------------------------------------------------------------------------
# Resampling


def resample(clip: AudioClip, target_rate_hz: int) -> AudioClip:
    """Polyphase anti-aliased conversion between the supported rates."""
    src = clip.sample_rate_hz
    if src not in SUPPORTED_RATES or target_rate_hz not in SUPPORTED_RATES:
        raise ValueError(f"unsupported rate pair {src} -> {target_rate_hz}")
    if src == target_rate_hz:
        return clip
    g = gcd(src, target_rate_hz)
    up, down = target_rate_hz // g, src // g
    y = scipy.signal.resample_poly(clip.samples, up, down, window=("kaiser", 8.0))
    return AudioClip(y, target_rate_hz)


def to_processing_rate(clip: AudioClip) -> AudioClip:
    return resample(clip, PROCESSING_RATE)


# --------------------------------------------------------------------------
# STFT


def sqrt_hann(n: int) -> np.ndarray:
    return np.sqrt(scipy.signal.get_window("hann", n, fftbins=True))


@dataclass(frozen=True)
class StftConfig:
    frame_len_samples: int = 320
    hop_samples: int = 160
    dft_size: int = 320
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.hop_samples <= 0 or self.frame_len_samples <= 0:
            raise ValueError("frame length and hop must be positive")
        if self.dft_size < self.frame_len_samples:
            raise ValueError("dft_size must be at least frame_len_samples")
        if self.window not in ("sqrt_hann", "hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def num_bins(self) -> int:
        return self.dft_size // 2 + 1

    def windows(self) -> tuple[np.ndarray, np.ndarray]:
        """Analysis and synthesis windows."""
        n = self.frame_len_samples
        if self.window == "sqrt_hann":
            w = sqrt_hann(n)
            return w, w
        if self.window == "hann":
            return scipy.signal.get_window("hann", n, fftbins=True), np.ones(n)
        return np.ones(n), np.ones(n)

    def cola_sum(self, n_hops: int = 8) -> np.ndarray:
        """Summed analysis*synthesis window products over one hop period."""
        wa, ws = self.windows()
        prod = wa * ws
        total = np.zeros(self.hop_samples * n_hops + self.frame_len_samples)
        for k in range(n_hops):
            total[k * self.hop_samples:k * self.hop_samples + self.frame_len_samples] += prod
        mid = self.frame_len_samples
        return total[mid:mid + self.hop_samples]


def default_stft_config(sample_rate_hz: int = PROCESSING_RATE) -> StftConfig:
    """20 ms frames, 10 ms hop, DFT size equal to the frame length."""
    frame = sample_rate_hz // 50
    return StftConfig(frame, frame // 2, frame)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    frames: np.ndarray  # (T, F) complex
    config: StftConfig
    sample_rate_hz: int = PROCESSING_RATE
    num_samples: int | None = None

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.num_bins:
            raise ValueError(
                f"frames shape {self.frames.shape} does not match {self.config.num_bins} bins")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    def phase(self) -> np.ndarray:
        return np.angle(self.frames)


def num_frames(n_samples: int, cfg: StftConfig) -> int:
    return 1 + (n_samples - cfg.frame_len_samples) // cfg.hop_samples


def stft(clip: AudioClip, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or default_stft_config(clip.sample_rate_hz)
    x = clip.samples
    if len(x) < cfg.frame_len_samples:
        raise ValueError(
            f"clip of {len(x)} samples is shorter than one {cfg.frame_len_samples}-sample frame")
    wa, _ = cfg.windows()
    t = num_frames(len(x), cfg)
    idx = np.arange(cfg.frame_len_samples)[None, :] + cfg.hop_samples * np.arange(t)[:, None]
    frames = np.fft.rfft(x[idx] * wa, n=cfg.dft_size, axis=1)
    return Spectrogram(frames, cfg, clip.sample_rate_hz, len(x))


def istft(spec: Spectrogram, length: int | None = None) -> AudioClip:
    """Overlap-add synthesis.

    Output length defaults to the original clip length when known; samples
    past the last frame are zero.
    """
    cfg = spec.config
    if spec.num_frames < 1:
        raise ValueError("spectrogram has no frames")
    _, ws = cfg.windows()
    frames = np.fft.irfft(spec.frames, n=cfg.dft_size, axis=1)[:, :cfg.frame_len_samples] * ws
    covered = (spec.num_frames - 1) * cfg.hop_samples + cfg.frame_len_samples
    if length is None:
        length = spec.num_samples if spec.num_samples is not None else covered
    out = np.zeros(max(length, covered))
    for t in range(spec.num_frames):
        s = t * cfg.hop_samples
        out[s:s + cfg.frame_len_samples] += frames[t]
    return AudioClip(out[:length], spec.sample_rate_hz)


def log_power_features(spec: Spectrogram, floor_eps: float = 1e-12) -> np.ndarray:
    if floor_eps <= 0:
        raise ValueError("floor_eps must be positive")
    return np.log(np.abs(spec.frames) ** 2 + floor_eps)


# --------------------------------------------------------------------------
# Levels


def rms(clip: AudioClip) -> float:
    if len(clip) == 0:
        raise ValueError("rms of an empty clip")
    return float(np.sqrt(np.mean(clip.samples ** 2)))


def frame_energies(x: np.ndarray, frame_len: int) -> np.ndarray:
    n_full = len(x) // frame_len
    e = np.sum(x[:n_full * frame_len].reshape(n_full, frame_len) ** 2, axis=1) / frame_len
    if len(x) % frame_len:
        e = np.append(e, np.mean(x[n_full * frame_len:] ** 2))
    return e


def activity_mask(clip: AudioClip, threshold_db: float = 40.0, frame_ms: float = 20.0) -> np.ndarray:
    """Per-sample boolean mask of frames within ``threshold_db`` of the loudest frame."""
    frame = max(1, int(round(clip.sample_rate_hz * frame_ms / 1000)))
    x = clip.samples
    e = frame_energies(x, frame)
    peak = e.max() if e.size else 0.0
    if peak <= 0.0:
        return np.zeros(len(x), dtype=bool)
    active = e > peak * 10.0 ** (-threshold_db / 10.0)
    return np.repeat(active, frame)[:len(x)]


def active_rms(clip: AudioClip, threshold_db: float = 40.0, frame_ms: float = 20.0) -> float:
    """RMS over frames whose energy is within ``threshold_db`` of the peak frame."""
    if len(clip) == 0:
        raise ValueError("active_rms of an empty clip")
    mask = activity_mask(clip, threshold_db, frame_ms)
    if not mask.any():
        raise NoActiveFramesError("clip has no active frames")
    return float(np.sqrt(np.mean(clip.samples[mask] ** 2)))


def db(x: float) -> float:
    return 20.0 * np.log10(x)
