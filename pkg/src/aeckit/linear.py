"""Linear echo cancellation: GCC-PHAT delay estimation and a time-domain NLMS filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip


class NoEchoDetected(ValueError):
    """Cross-correlation has no peak standing out of the noise floor."""


def gcc_phat(sig: np.ndarray, ref: np.ndarray, max_lag: int, beta: float = 1.0) -> np.ndarray:
    """Generalized cross-correlation with phase transform for lags ``-max_lag..max_lag``.

    Positive lag means ``sig`` lags ``ref``.  ``beta`` < 1 gives the partial
    (PHAT-beta) weighting.
    """
    n = len(sig) + len(ref)
    nfft = 1 << (n - 1).bit_length()
    cross = np.fft.rfft(sig, nfft) * np.conj(np.fft.rfft(ref, nfft))
    mag = np.abs(cross)
    cross /= np.maximum(mag, 1e-12 * mag.max() + 1e-300) ** beta
    cc = np.fft.irfft(cross, nfft)
    return np.concatenate([cc[-max_lag:], cc[:max_lag + 1]]) if max_lag > 0 else cc[:1]


def estimate_delay(mic: AudioClip, loopback: AudioClip, max_delay_ms: float = 1000.0,
                   min_peak_ratio: float = 8.0) -> float:
    """Delay of the echo in ``mic`` relative to ``loopback``, in milliseconds.

    The GCC-PHAT peak over non-negative lags is refined by parabolic
    interpolation.  Raises :class:`NoEchoDetected` when the peak is less than
    ``min_peak_ratio`` times the robust spread of the correlation.
    """
    if mic.sample_rate_hz != loopback.sample_rate_hz:
        raise ValueError("mic and loopback rates differ")
    sr = mic.sample_rate_hz
    max_lag = int(round(max_delay_ms * sr / 1000))
    n = min(len(mic), len(loopback))
    cc = gcc_phat(mic.samples[:n], loopback.samples[:n], max_lag)
    lags = np.arange(-max_lag, max_lag + 1)
    pos = cc[max_lag:]
    k = int(np.argmax(pos))
    peak = pos[k]
    spread = 1.4826 * np.median(np.abs(cc - np.median(cc)))
    if not np.isfinite(peak) or peak <= 0 or peak < min_peak_ratio * spread:
        raise NoEchoDetected(f"no correlation peak (peak {peak:.3g}, spread {spread:.3g})")
    frac = 0.0
    if 0 < k < len(pos) - 1:
        a, b, c = pos[k - 1], pos[k], pos[k + 1]
        denom = a - 2 * b + c
        if denom < 0:
            frac = 0.5 * (a - c) / denom
    return float((lags[max_lag + k] + frac) * 1000.0 / sr)


def align(loopback: AudioClip, delay_ms: float) -> AudioClip:
    """Delay the loopback by ``delay_ms`` (rounded to whole samples), keeping its length."""
    d = int(round(delay_ms * loopback.sample_rate_hz / 1000))
    y = np.zeros(len(loopback))
    if 0 <= d < len(loopback):
        y[d:] = loopback.samples[:len(loopback) - d]
    return loopback.with_samples(y)


@dataclass(frozen=True)
class NlmsConfig:
    num_taps: int = 3200
    step_size: float = 0.5
    regularization_eps: float = 0.1
    freeze_on_near_end: bool = False

    def __post_init__(self):
        if self.num_taps < 1:
            raise ValueError("num_taps must be >= 1")
        if not 0 < self.step_size < 2:
            raise ValueError("step_size must lie in (0, 2)")
        if self.regularization_eps <= 0:
            raise ValueError("regularization_eps must be positive")


class NlmsFilter:
    """Streaming NLMS echo canceller.

    State is the tap vector and the last ``num_taps`` loopback samples.  One
    instance serves one stream; call :meth:`process` block by block.
    """

    def __init__(self, cfg: NlmsConfig | None = None):
        self.cfg = cfg or NlmsConfig()
        self.taps = np.zeros(self.cfg.num_taps)
        self._history = np.zeros(self.cfg.num_taps - 1)

    def process(self, mic: np.ndarray, loopback: np.ndarray, freeze: np.ndarray | None = None):
        """Return ``(residual, echo_estimate)`` for one block."""
        mic = np.asarray(mic, dtype=np.float64)
        loopback = np.asarray(loopback, dtype=np.float64)
        if mic.shape != loopback.shape:
            raise ValueError("mic and loopback blocks differ in length")
        if not (np.all(np.isfinite(mic)) and np.all(np.isfinite(loopback))):
            raise ValueError("NaN or Inf in NLMS input")
        L = self.cfg.num_taps
        mu, eps = self.cfg.step_size, self.cfg.regularization_eps
        # xr[n + L - 1 - k] = x(n - k): reversed taps window is a contiguous slice
        xr = np.concatenate([self._history, loopback])
        w = self.taps[::-1].copy()
        est = np.empty_like(mic)
        res = np.empty_like(mic)
        frozen = np.zeros(len(mic), dtype=bool) if freeze is None else np.asarray(freeze, dtype=bool)
        power = 0.0
        for n in range(len(mic)):
            x = xr[n:n + L]
            if n % 4096 == 0:
                power = float(x @ x)  # periodic refresh bounds drift of the running sum
            else:
                power += xr[n + L - 1] ** 2 - xr[n - 1] ** 2
            y_hat = float(w @ x)
            e = mic[n] - y_hat
            est[n] = y_hat
            res[n] = e
            if not frozen[n] and power > 0.0:
                w += (mu * e / (power + eps)) * x
        self.taps = w[::-1].copy()
        self._history = xr[len(xr) - (L - 1):] if L > 1 else np.zeros(0)
        if not np.all(np.isfinite(self.taps)):
            raise FloatingPointError("NLMS taps diverged")
        return res, est


def nlms_process(mic: AudioClip, loopback: AudioClip, cfg: NlmsConfig | None = None,
                 near_end_active: np.ndarray | None = None) -> tuple[AudioClip, AudioClip]:
    """Run NLMS over whole clips; ``residual + echo_estimate == mic`` sample-wise.

    With ``cfg.freeze_on_near_end`` the per-sample ``near_end_active`` flags
    suspend adaptation.
    """
    cfg = cfg or NlmsConfig()
    if len(mic) != len(loopback) or mic.sample_rate_hz != loopback.sample_rate_hz:
        raise ValueError("mic and loopback must share length and rate")
    freeze = near_end_active if cfg.freeze_on_near_end else None
    if freeze is not None and len(freeze) != len(mic):
        raise ValueError("near_end_active length mismatch")
    f = NlmsFilter(cfg)
    res, est = f.process(mic.samples, loopback.samples, freeze)
    return mic.with_samples(res), mic.with_samples(est)


def nlms_filter_taps(mic: AudioClip, loopback: AudioClip, cfg: NlmsConfig | None = None,
                     near_end_active: np.ndarray | None = None) -> np.ndarray:
    cfg = cfg or NlmsConfig()
    f = NlmsFilter(cfg)
    f.process(mic.samples, loopback.samples, near_end_active if cfg.freeze_on_near_end else None)
    return f.taps
