"""Synthetic echo scenarios.

A scenario takes a far-end excerpt, runs it through an optional loudspeaker
nonlinearity, a room impulse response and a bulk delay to make the echo,
then mixes it with a zero-padded near-end excerpt at a target
signal-to-echo ratio and optionally adds near-end noise at a target SNR.
All stored components are rounded to float32 so WAV round-trips are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import AudioClip, NoActiveFramesError, active_rms, read_wav, rms, write_wav

RT60_RANGE = (0.2, 1.2)
SER_RANGE = (-10.0, 10.0)
SNR_RANGE = (0.0, 40.0)
NEAR_END_RANGE = (3.0, 7.0)
DELAY_RANGE_MS = (10.0, 500.0)
MANIFEST_VERSION = 1


class SilentExcerptError(ValueError):
    """No sufficiently active excerpt could be found in a source clip."""


class ManifestError(ValueError):
    """Manifest is missing, malformed, or does not match the schema."""


@dataclass(frozen=True)
class RirSpec:
    rt60_s: float
    length_s: float | None = None
    direct_delay_ms: float = 0.0
    seed: int = 0
    tail_level: float = 0.1
    allow_override: bool = False

    def __post_init__(self):
        if self.length_s is None:
            object.__setattr__(self, "length_s", max(self.rt60_s, 0.01))
        if self.rt60_s < 0:
            raise ValueError("rt60_s must be non-negative")
        if not self.allow_override and not (RT60_RANGE[0] <= self.rt60_s <= RT60_RANGE[1]):
            raise ValueError(f"rt60_s={self.rt60_s} outside {RT60_RANGE}; set allow_override")
        if self.length_s < self.rt60_s:
            raise ValueError("length_s must be at least rt60_s")
        if self.direct_delay_ms < 0:
            raise ValueError("direct_delay_ms must be non-negative")


@dataclass(frozen=True)
class NonlinearitySpec:
    kind: str = "none"
    clip_level: float | None = None
    sigmoid_slope: float | None = None

    def __post_init__(self):
        if self.kind == "none":
            ok = self.clip_level is None and self.sigmoid_slope is None
        elif self.kind == "hard_clip":
            ok = self.sigmoid_slope is None and self.clip_level is not None and 0 < self.clip_level <= 1
        elif self.kind == "sigmoid":
            ok = self.clip_level is None and self.sigmoid_slope is not None and self.sigmoid_slope > 0
        else:
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if not ok:
            raise ValueError(f"invalid parameters for nonlinearity {self}")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    time_s: float = 0.0
    delay_ms: float = 0.0
    duration_s: float = 0.0
    breakpoints: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("delay_jump", "gain_variation", "glitch"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        object.__setattr__(self, "breakpoints", tuple((float(t), float(g)) for t, g in self.breakpoints))
        if self.kind == "gain_variation" and len(self.breakpoints) < 1:
            raise ValueError("gain_variation needs at least one breakpoint")
        if self.kind == "glitch" and self.duration_s <= 0:
            raise ValueError("glitch needs a positive duration")

    def span(self) -> tuple[float, float]:
        if self.kind == "glitch":
            return self.time_s, self.time_s + self.duration_s
        if self.kind == "gain_variation":
            ts = [t for t, _ in self.breakpoints]
            return min(ts), max(ts)
        return self.time_s, self.time_s


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    ser_db: float
    snr_db: float | None
    nonlinearity: NonlinearitySpec
    use_noisy_speech: bool
    near_end_speech_s: float
    rir: RirSpec
    extra_delay_ms: float = 0.0
    clip_len_s: float = 10.0
    sample_rate_hz: int = 16000
    perturbations: tuple[PerturbationSpec, ...] = ()
    allow_override: bool = False

    def __post_init__(self):
        object.__setattr__(self, "perturbations", tuple(self.perturbations))
        if not self.allow_override:
            if not SER_RANGE[0] <= self.ser_db <= SER_RANGE[1]:
                raise ValueError(f"ser_db={self.ser_db} outside {SER_RANGE}")
            if self.snr_db is not None and not SNR_RANGE[0] <= self.snr_db <= SNR_RANGE[1]:
                raise ValueError(f"snr_db={self.snr_db} outside {SNR_RANGE}")
            if not NEAR_END_RANGE[0] <= self.near_end_speech_s <= NEAR_END_RANGE[1]:
                raise ValueError(f"near_end_speech_s={self.near_end_speech_s} outside {NEAR_END_RANGE}")
        if self.near_end_speech_s > self.clip_len_s:
            raise ValueError("near-end speech longer than the clip")
        if self.extra_delay_ms < 0:
            raise ValueError("extra_delay_ms must be non-negative")


@dataclass(frozen=True, eq=False)
class ScenarioBundle:
    far_end: AudioClip
    echo: AudioClip
    near_end_speech: AudioClip
    mic: AudioClip
    noise: AudioClip
    spec: ScenarioSpec

    def __post_init__(self):
        clips = (self.far_end, self.echo, self.near_end_speech, self.mic, self.noise)
        if len({len(c) for c in clips}) != 1 or len({c.sample_rate_hz for c in clips}) != 1:
            raise ValueError("bundle clips must share length and sample rate")

    def __eq__(self, other):
        if not isinstance(other, ScenarioBundle):
            return NotImplemented
        return (self.spec == other.spec and self.far_end == other.far_end and self.echo == other.echo
                and self.near_end_speech == other.near_end_speech and self.mic == other.mic
                and self.noise == other.noise)

    @property
    def sample_rate_hz(self) -> int:
        return self.mic.sample_rate_hz

    def near_end_active(self) -> np.ndarray:
        """Per-sample flag: near-end speech present."""
        return self.near_end_speech.samples != 0.0


# --------------------------------------------------------------------------
# Building blocks


def generate_rir(spec: RirSpec, sample_rate_hz: int) -> AudioClip:
    """Unit direct path followed by an exponentially decaying Gaussian tail."""
    n = max(int(round(spec.length_s * sample_rate_hz)), 1)
    d = int(round(spec.direct_delay_ms * sample_rate_hz / 1000))
    h = np.zeros(max(n, d + 1))
    h[d] = 1.0
    if spec.rt60_s > 0:
        rng = np.random.default_rng(spec.seed)
        m = len(h) - d - 1
        t = np.arange(1, m + 1) / sample_rate_hz
        # 60 dB energy decay over rt60 -> amplitude decay 10**(-3 t / rt60)
        h[d + 1:] = spec.tail_level * rng.standard_normal(m) * 10.0 ** (-3.0 * t / spec.rt60_s)
    return AudioClip(h, sample_rate_hz)


def apply_nonlinearity(x: AudioClip, nl: NonlinearitySpec) -> AudioClip:
    if nl.kind == "none":
        return x
    if nl.kind == "hard_clip":
        return x.with_samples(np.clip(x.samples, -nl.clip_level, nl.clip_level))
    y = 2.0 / (1.0 + np.exp(-nl.sigmoid_slope * x.samples)) - 1.0
    ry = np.sqrt(np.mean(y ** 2)) if len(y) else 0.0
    if ry > 0:
        y *= np.sqrt(np.mean(x.samples ** 2)) / ry
    return x.with_samples(y)


def _ratio_db(ref_level: float, other_level: float) -> float:
    return 20.0 * math.log10(ref_level / other_level)


def mix_at_ser(near_speech: AudioClip, echo: AudioClip, ser_db: float) -> tuple[AudioClip, float]:
    """Scale ``echo`` so the active-frame power ratio near/echo equals ``ser_db``."""
    ref = active_rms(near_speech)
    try:
        lvl = active_rms(echo)
    except NoActiveFramesError:
        raise ValueError("echo is silent") from None
    gain = ref / lvl * 10.0 ** (-ser_db / 20.0)
    scaled = echo.with_samples(echo.samples * gain)
    return scaled, _ratio_db(ref, active_rms(scaled))


def scale_noise(signal: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    """Noise scaled so active signal power over mean noise power equals ``snr_db``."""
    level = rms(noise)
    if level == 0.0:
        return noise
    return noise.with_samples(noise.samples * (active_rms(signal) / level * 10.0 ** (-snr_db / 20.0)))


def mix_at_snr(signal: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    if len(signal) != len(noise):
        raise ValueError("signal and noise lengths differ")
    return signal.with_samples(signal.samples + scale_noise(signal, noise, snr_db).samples)


def measured_ser_db(bundle: ScenarioBundle) -> float:
    return _ratio_db(active_rms(bundle.near_end_speech), active_rms(bundle.echo))


def measured_snr_db(bundle: ScenarioBundle) -> float:
    n = rms(bundle.noise)
    return math.inf if n == 0 else _ratio_db(active_rms(bundle.near_end_speech), n)


def delay(x: AudioClip, delay_ms: float) -> AudioClip:
    d = int(round(delay_ms * x.sample_rate_hz / 1000))
    if d == 0:
        return x
    y = np.zeros(len(x))
    if d < len(x):
        y[d:] = x.samples[:len(x) - d]
    return x.with_samples(y)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def pick_excerpt(source: AudioClip, n: int, rng: np.random.Generator,
                 min_level_dbfs: float = -45.0, retries: int = 10) -> np.ndarray:
    """Random ``n``-sample excerpt whose active RMS clears ``min_level_dbfs``."""
    if len(source) < n:
        raise ValueError(f"source of {len(source)} samples shorter than requested {n}")
    floor = 10.0 ** (min_level_dbfs / 20.0)
    for _ in range(retries):
        start = int(rng.integers(0, len(source) - n + 1))
        seg = source.samples[start:start + n]
        try:
            if active_rms(AudioClip(seg, source.sample_rate_hz)) >= floor:
                return seg.copy()
        except NoActiveFramesError:
            pass
    raise SilentExcerptError(f"no active excerpt after {retries} attempts")


def synthesize_scenario(spec: ScenarioSpec, far_source: AudioClip, near_source: AudioClip,
                        noise_source: AudioClip | None = None, retries: int = 10) -> ScenarioBundle:
    sr = spec.sample_rate_hz
    for c in (far_source, near_source) + ((noise_source,) if noise_source is not None else ()):
        if c.sample_rate_hz != sr:
            raise ValueError(f"source at {c.sample_rate_hz} Hz, scenario at {sr} Hz")
    n = int(round(spec.clip_len_s * sr))
    n_near = int(round(spec.near_end_speech_s * sr))
    rng = np.random.default_rng([spec.seed, 2])
    noisy = spec.use_noisy_speech and spec.snr_db is not None
    if noisy and noise_source is None:
        raise ValueError("noisy scenario needs a noise source")

    far = AudioClip(pick_excerpt(far_source, n, rng, retries=retries), sr)
    if noisy:
        far_noise = AudioClip(pick_excerpt(noise_source, n, rng, min_level_dbfs=-120, retries=retries), sr)
        far = mix_at_snr(far, far_noise, spec.snr_db)
    far = far.with_samples(_f32(far.samples))

    path = apply_nonlinearity(far, spec.nonlinearity)
    h = generate_rir(spec.rir, sr)
    wet = scipy.signal.convolve(path.samples, h.samples)[:n]
    echo_raw = delay(AudioClip(wet, sr), spec.extra_delay_ms)

    near = np.zeros(n)
    near[:n_near] = pick_excerpt(near_source, n_near, rng, retries=retries)
    near_clip = AudioClip(_f32(near), sr)

    echo, _ = mix_at_ser(near_clip, echo_raw, spec.ser_db)
    echo = echo.with_samples(_f32(echo.samples))
    if noisy:
        raw_noise = AudioClip(pick_excerpt(noise_source, n, rng, min_level_dbfs=-120, retries=retries), sr)
        noise = scale_noise(near_clip, raw_noise, spec.snr_db)
        noise = noise.with_samples(_f32(noise.samples))
    else:
        noise = AudioClip(np.zeros(n), sr)
    mic = AudioClip(_f32(echo.samples + near_clip.samples + noise.samples), sr)
    bundle = ScenarioBundle(far, echo, near_clip, mic, noise, spec)
    return apply_perturbations(bundle) if spec.perturbations else bundle


def sample_scenario_spec(seed: int, sample_rate_hz: int = 16000, clip_len_s: float = 10.0,
                         p_nonlinear: float = 0.8, p_noisy: float = 0.5,
                         delay_range_ms: tuple[float, float] = DELAY_RANGE_MS, **overrides) -> ScenarioSpec:
    """Draw a scenario with the default parameter distributions; keyword overrides win."""
    rng = np.random.default_rng([seed, 1])
    ser = float(rng.uniform(*SER_RANGE))
    snr = float(rng.uniform(*SNR_RANGE))
    if rng.random() < p_nonlinear:
        if rng.random() < 0.5:
            nl = NonlinearitySpec("hard_clip", clip_level=float(rng.uniform(0.05, 0.5)))
        else:
            nl = NonlinearitySpec("sigmoid", sigmoid_slope=float(rng.uniform(2.0, 10.0)))
    else:
        nl = NonlinearitySpec()
    noisy = bool(rng.random() < p_noisy)
    near_s = float(rng.uniform(*NEAR_END_RANGE))
    rt60 = float(rng.uniform(*RT60_RANGE))
    rir_seed = int(rng.integers(0, 2 ** 63))
    delay_ms = float(rng.uniform(*delay_range_ms))
    params = dict(seed=seed, ser_db=ser, snr_db=snr, nonlinearity=nl, use_noisy_speech=noisy,
                  near_end_speech_s=near_s, rir=RirSpec(rt60_s=rt60, seed=rir_seed),
                  extra_delay_ms=delay_ms, clip_len_s=clip_len_s, sample_rate_hz=sample_rate_hz)
    params.update(overrides)
    return ScenarioSpec(**params)


# --------------------------------------------------------------------------
# Recording protocols


def build_fest_clip(far_end: AudioClip) -> AudioClip:
    """Far-end single talk: the far end played back twice."""
    if len(far_end) == 0:
        raise ValueError("empty far-end clip")
    return far_end.with_samples(np.concatenate([far_end.samples, far_end.samples]))


def build_dt_clip(far_end: AudioClip, gap_s: float) -> AudioClip:
    """Double talk: far end twice with a silent gap between the plays."""
    if len(far_end) == 0:
        raise ValueError("empty far-end clip")
    gap = np.zeros(int(round(gap_s * far_end.sample_rate_hz)))
    return far_end.with_samples(np.concatenate([far_end.samples, gap, far_end.samples]))


# --------------------------------------------------------------------------
# Perturbations


def _check_events(events, duration_s):
    for p in events:
        a, b = p.span()
        if a < 0 or b > duration_s:
            raise ValueError(f"perturbation {p.kind} span ({a}, {b}) outside clip of {duration_s} s")
    for kind in ("delay_jump", "gain_variation", "glitch"):
        spans = sorted(p.span() for p in events if p.kind == kind)
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 < b0 or (kind == "delay_jump" and a1 == a0):
                raise ValueError(f"overlapping {kind} events at {a1} s")


def apply_perturbations(bundle: ScenarioBundle) -> ScenarioBundle:
    """Apply delay jumps, then gain variation, then glitches.

    A delay jump sets the echo's extra offset (relative to the unperturbed
    path) from its time onward, superseding earlier jumps.  Gain variation
    scales both the far end and its echo.  A glitch zeroes every mic-side
    component over its span; the loopback is untouched.
    """
    events = bundle.spec.perturbations
    if not events:
        return bundle
    sr = bundle.sample_rate_hz
    n = len(bundle.mic)
    _check_events(events, n / sr)
    far = bundle.far_end.samples.copy()
    echo = bundle.echo.samples.copy()
    near = bundle.near_end_speech.samples.copy()
    noise = bundle.noise.samples.copy()

    jumps = sorted((p for p in events if p.kind == "delay_jump"), key=lambda p: p.time_s)
    if jumps:
        src = echo.copy()
        bounds = [int(round(p.time_s * sr)) for p in jumps] + [n]
        for p, a, b in zip(jumps, bounds, bounds[1:]):
            d = int(round(p.delay_ms * sr / 1000))
            idx = np.arange(a, b) - d
            ok = (idx >= 0) & (idx < n)
            seg = np.zeros(b - a)
            seg[ok] = src[idx[ok]]
            echo[a:b] = seg

    t = np.arange(n) / sr
    for p in events:
        if p.kind == "gain_variation":
            ts, gs = zip(*p.breakpoints)
            env = _f32(np.interp(t, ts, gs))
            far = _f32(far * env)
            echo = _f32(echo * env)

    for p in events:
        if p.kind == "glitch":
            a = int(round(p.time_s * sr))
            b = int(round((p.time_s + p.duration_s) * sr))
            echo[a:b] = near[a:b] = noise[a:b] = 0.0

    clip = lambda x: AudioClip(x, sr)  # noqa: E731
    return ScenarioBundle(clip(far), clip(echo), clip(near), clip(_f32(echo + near + noise)), clip(noise), bundle.spec)


# --------------------------------------------------------------------------
# Manifest

_FILE_KEYS = ("farend", "echo", "nearend", "mic", "noise")
_RECORD_KEYS = {
    "index", "id", "split", "sample_rate_hz", "seed", "ser_db", "snr_db", "use_noisy_speech",
    "near_end_speech_s", "clip_len_s", "extra_delay_ms", "rt60_s", "rir", "nonlinearity",
    "perturbations", "allow_override", "files", "meta",
}
_RIR_KEYS = {"length_s", "direct_delay_ms", "seed", "tail_level", "allow_override"}
_NL_KEYS = {"kind", "clip_level", "sigmoid_slope"}
_PERT_KEYS = {"kind", "time_s", "delay_ms", "duration_s", "breakpoints"}


def spec_to_record(spec: ScenarioSpec) -> dict:
    rir = asdict(spec.rir)
    rt60 = rir.pop("rt60_s")
    return {
        "seed": spec.seed,
        "ser_db": spec.ser_db,
        "snr_db": spec.snr_db,
        "use_noisy_speech": spec.use_noisy_speech,
        "near_end_speech_s": spec.near_end_speech_s,
        "clip_len_s": spec.clip_len_s,
        "sample_rate_hz": spec.sample_rate_hz,
        "extra_delay_ms": spec.extra_delay_ms,
        "rt60_s": rt60,
        "rir": rir,
        "nonlinearity": asdict(spec.nonlinearity),
        "perturbations": [
            {**asdict(p), "breakpoints": [list(bp) for bp in p.breakpoints]} for p in spec.perturbations
        ],
        "allow_override": spec.allow_override,
    }


def _require_keys(obj, allowed: set, where: str, required: set | None = None):
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ManifestError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = (allowed if required is None else required) - set(obj)
    if missing:
        raise ManifestError(f"{where}: missing field(s) {sorted(missing)}")


def record_to_spec(rec: dict) -> ScenarioSpec:
    where = f"scenario {rec.get('index', '?')}"
    _require_keys(rec, _RECORD_KEYS, where, required=_RECORD_KEYS - {"meta", "allow_override"})
    _require_keys(rec["rir"], _RIR_KEYS, where + ".rir")
    _require_keys(rec["nonlinearity"], _NL_KEYS, where + ".nonlinearity")
    for p in rec["perturbations"]:
        _require_keys(p, _PERT_KEYS, where + ".perturbations")
    try:
        return ScenarioSpec(
            seed=rec["seed"], ser_db=rec["ser_db"], snr_db=rec["snr_db"],
            nonlinearity=NonlinearitySpec(**rec["nonlinearity"]),
            use_noisy_speech=rec["use_noisy_speech"], near_end_speech_s=rec["near_end_speech_s"],
            rir=RirSpec(rt60_s=rec["rt60_s"], **rec["rir"]), extra_delay_ms=rec["extra_delay_ms"],
            clip_len_s=rec["clip_len_s"], sample_rate_hz=rec["sample_rate_hz"],
            perturbations=tuple(PerturbationSpec(**p) for p in rec["perturbations"]),
            allow_override=rec.get("allow_override", False),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: {exc}") from exc


def scenario_id(index: int) -> str:
    return f"{index:05d}"


def emit_manifest(bundles, out_dir, validation_count: int = 0, fmt: str = "float32",
                  meta: list[dict] | None = None) -> Path:
    """Write five WAVs per scenario plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, b in enumerate(bundles):
        sid = scenario_id(i)
        files = {k: f"{sid}_{k}.wav" for k in _FILE_KEYS}
        for key, clip in zip(_FILE_KEYS, (b.far_end, b.echo, b.near_end_speech, b.mic, b.noise)):
            write_wav(clip, out / files[key], fmt)
        rec = {"index": i, "id": sid, "split": "validation" if i < validation_count else "train",
               **spec_to_record(b.spec), "files": files}
        if meta is not None:
            rec["meta"] = meta[i]
        records.append(rec)
    path = out / "manifest.json"
    doc = {"version": MANIFEST_VERSION, "format": fmt, "scenarios": records}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> list[dict]:
    """Validated manifest records.  ``path`` may be the file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    _require_keys(doc, {"version", "format", "scenarios"}, "manifest")
    if doc["version"] != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc['version']}")
    for rec in doc["scenarios"]:
        record_to_spec(rec)
        _require_keys(rec["files"], set(_FILE_KEYS), f"scenario {rec['index']}.files")
    return doc["scenarios"]


def load_bundle(rec: dict, root) -> ScenarioBundle:
    root = Path(root)
    clips = []
    for k in _FILE_KEYS:
        p = root / rec["files"][k]
        if not p.exists():
            raise ManifestError(f"missing file {p}")
        clips.append(read_wav(p))
    far, echo, near, mic, noise = clips
    return ScenarioBundle(far, echo, near, mic, noise, record_to_spec(rec))


def load_manifest(path) -> list[ScenarioBundle]:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    return [load_bundle(rec, root) for rec in read_manifest(path)]
