"""Synthetic acoustic-echo scenarios, hybrid NLMS + GRU-mask echo cancellation, and AEC metrics."""

from .audio import AudioClip, Spectrogram, StftConfig, istft, read_wav, resample, stft, write_wav

__version__ = "0.1.0"

__all__ = ["AudioClip", "Spectrogram", "StftConfig", "istft", "read_wav", "resample", "stft", "write_wav"]
