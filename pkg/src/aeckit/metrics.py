"""Objective metrics: ERLE, word accuracy, RT60, correlations and the challenge score."""

from __future__ import annotations

import math
import re
import string
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.stats import rankdata

from .audio import AudioClip

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


class UnreliableEstimateError(ValueError):
    """The decay curve does not support an RT60 fit."""


# --------------------------------------------------------------------------
# ERLE


def erle_db(mic: AudioClip, residual: AudioClip, region: tuple[float, float] | np.ndarray | None = None) -> float:
    """Echo return loss enhancement in dB.

    ``region`` is either ``(start_s, end_s)`` or a boolean sample mask.
    A silent residual returns ``math.inf``.
    """
    if len(mic) != len(residual):
        raise ValueError(f"length mismatch: mic {len(mic)} vs residual {len(residual)}")
    y, e = mic.samples, residual.samples
    if region is not None:
        if isinstance(region, tuple):
            a = int(round(region[0] * mic.sample_rate_hz))
            b = int(round(region[1] * mic.sample_rate_hz))
            if a < 0 or b > len(y) or a >= b:
                raise ValueError(f"region {region} outside clip of {mic.duration_s:.3f} s")
            y, e = y[a:b], e[a:b]
        else:
            mask = np.asarray(region, dtype=bool)
            y, e = y[mask], e[mask]
    py = float(np.mean(y ** 2)) if y.size else 0.0
    pe = float(np.mean(e ** 2)) if e.size else 0.0
    if py == 0.0:
        raise ValueError("microphone signal is silent in the evaluated region")
    if pe == 0.0:
        return math.inf
    return 10.0 * math.log10(py / pe)


# --------------------------------------------------------------------------
# Word accuracy


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


@dataclass(frozen=True)
class Transcript:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if any(not t for t in self.tokens):
            raise ValueError("transcript tokens must be non-empty strings")

    @classmethod
    def from_text(cls, text: str) -> "Transcript":
        return cls(tuple(tokenize(text)))

    def __len__(self):
        return len(self.tokens)


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance over token sequences with unit costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Transcript, hypothesis: Transcript) -> float:
    if len(reference) == 0:
        raise ValueError("reference transcript is empty")
    return edit_distance(reference.tokens, hypothesis.tokens) / len(reference)


def wacc(reference: Transcript, hypothesis: Transcript) -> float:
    """Word accuracy, ``1 - WER``.  Not clamped; insertions can push it negative."""
    return 1.0 - wer(reference, hypothesis)


# --------------------------------------------------------------------------
# Challenge metric


@dataclass(frozen=True)
class ChallengeScores:
    fe_st_echo_dmos: float
    ne_st_mos: float
    dt_echo_dmos: float
    dt_other_dmos: float
    wacc: float

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            lo, hi = (0.0, 1.0) if f.name == "wacc" else (1.0, 5.0)
            if not (lo <= v <= hi):
                raise ValueError(f"{f.name}={v} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return asdict(self)


def challenge_metric(s: ChallengeScores) -> float:
    s.validate()
    mos = (s.fe_st_echo_dmos, s.ne_st_mos, s.dt_echo_dmos, s.dt_other_dmos)
    return (sum((m - 1.0) / 4.0 for m in mos) + s.wacc) / 5.0


# --------------------------------------------------------------------------
# RT60


def schroeder_curve_db(rir: np.ndarray) -> np.ndarray:
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def estimate_rt60(rir: AudioClip, fit_range_db: tuple[float, float] = (-5.0, -25.0),
                  min_r2: float = 0.98) -> float:
    """RT60 from Schroeder backward integration and a T20 line fit."""
    h = rir.samples
    if not np.any(h):
        raise UnreliableEstimateError("impulse response is all zeros")
    curve = schroeder_curve_db(h)
    hi, lo = fit_range_db
    below_hi = np.nonzero(curve <= hi)[0]
    below_lo = np.nonzero(curve <= lo)[0]
    if below_hi.size == 0 or below_lo.size == 0:
        raise UnreliableEstimateError("decay never reaches the fit range")
    a, b = below_hi[0], below_lo[0]
    if b - a < 3:
        raise UnreliableEstimateError("too few samples in the decay fit range")
    t = np.arange(a, b) / rir.sample_rate_hz
    seg = curve[a:b]
    slope, intercept = np.polyfit(t, seg, 1)
    pred = slope * t + intercept
    ss_res = float(np.sum((seg - pred) ** 2))
    ss_tot = float(np.sum((seg - seg.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    if slope >= 0 or r2 < min_r2:
        raise UnreliableEstimateError(f"decay curve is not linear enough (r2={r2:.3f})")
    return -60.0 / slope


# --------------------------------------------------------------------------
# Correlation


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D vectors of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    return x, y


def pcc(x, y) -> float:
    x, y = _check_pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("constant input vector")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def srcc(x, y) -> float:
    x, y = _check_pair(x, y)
    return pcc(rankdata(x, method="average"), rankdata(y, method="average"))


# --------------------------------------------------------------------------
# Evaluation regions

REGION_KINDS = ("fest", "dt", "nest")


def eval_region(clip_len_s: float, scenario_kind: str, dt_fraction: float = 2.0 / 3.0) -> tuple[float, float]:
    """Scored span: second half for far-end single talk, final third for double talk."""
    if clip_len_s <= 0:
        raise ValueError("clip length must be positive")
    if scenario_kind == "fest":
        return clip_len_s / 2.0, clip_len_s
    if scenario_kind == "dt":
        return clip_len_s * dt_fraction, clip_len_s
    if scenario_kind == "nest":
        return 0.0, clip_len_s
    raise ValueError(f"unknown scenario kind {scenario_kind!r}")
