"""Batch orchestration: generate, process, evaluate, score.

Every command reads and writes plain files so the steps can be run
independently from the CLI:

* ``generate`` writes WAVs plus ``manifest.json``;
* ``process`` writes ``{id}_processed.wav`` and ``process_log.json``
  (per-clip wall-clock and real-time factor);
* ``score`` writes ``scores.json`` from an external scoring service;
* ``evaluate`` writes ``report.json`` and returns a console table.
"""

from __future__ import annotations

import configparser
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import PROCESSING_RATE, AudioClip, StftConfig, read_wav, resample, write_wav
from .linear import NlmsConfig, NoEchoDetected, align, estimate_delay, nlms_process
from .metrics import ChallengeScores, challenge_metric, erle_db, eval_region, wacc
from .neural import ModelConfig, enhance, load_weights
from .service import UNAVAILABLE, ScoreParseError, score_client_submit, transcript_client
from .sources import DirectoryPool, SpeakerPool, noise_like, speech_like
from .synth import (
    DELAY_RANGE_MS,
    emit_manifest,
    read_manifest,
    record_to_spec,
    sample_scenario_spec,
    synthesize_scenario,
)

log = logging.getLogger(__name__)

STAGES = ("delay_align", "nlms", "neural")
TIMING_KEYS = ("rtf", "processing_s", "mean_rtf", "machine")
SCORE_FIELDS = ("fe_st_echo_dmos", "ne_st_mos", "dt_echo_dmos", "dt_other_dmos")


# --------------------------------------------------------------------------
# Config


def load_config(path) -> dict[str, dict[str, str]]:
    """INI-style ``key = value`` file with one section per subcommand."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return {s: dict(cp[s]) for s in cp.sections()}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


@dataclass
class GenerateConfig:
    validation_count: int = 500
    sample_rate_hz: int = 16000
    clip_len_s: float = 10.0
    speaker_pool_size: int = 1627
    p_nonlinear: float = 0.8
    p_noisy: float = 0.5
    delay_min_ms: float = DELAY_RANGE_MS[0]
    delay_max_ms: float = DELAY_RANGE_MS[1]
    speech_dir: str = ""
    noise_dir: str = ""
    format: str = "float32"

    @classmethod
    def from_section(cls, section: dict[str, str] | None) -> "GenerateConfig":
        cfg = cls()
        for k, v in (section or {}).items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown [generate] key {k!r}")
            setattr(cfg, k, _coerce(v, getattr(cfg, k)))
        return cfg


# --------------------------------------------------------------------------
# generate


def scenario_seed(master_seed: int, index: int) -> int:
    """Independent per-scenario seed derived from the master seed and index."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


def _sources(seed: int, spec, split: str, cfg: GenerateConfig, pool, speech_dirs, noise_dirs):
    rng = np.random.default_rng([seed, 3])
    sr = cfg.sample_rate_hz
    if speech_dirs is not None:
        a, b = rng.choice(len(speech_dirs), size=2, replace=False)
        far, near = speech_dirs.load(int(a), rng), speech_dirs.load(int(b), rng)
        meta = {"far_speaker": int(a), "near_speaker": int(b)}
    else:
        a, b = pool.pick_two(rng, split)
        far = speech_like(spec.clip_len_s + 2.0, sr, rng, pool.profile(a))
        near = speech_like(spec.near_end_speech_s + 2.0, sr, rng, pool.profile(b))
        meta = {"far_speaker": int(a), "near_speaker": int(b)}
    if noise_dirs is not None:
        noise = noise_dirs.load(int(rng.integers(len(noise_dirs))), rng)
    else:
        noise = noise_like(spec.clip_len_s + 1.0, sr, rng)
    return far, near, noise, meta


def cmd_generate(master_seed: int, count: int, out_dir, config: GenerateConfig | None = None) -> Path:
    cfg = config or GenerateConfig()
    if count < 1:
        raise ValueError("count must be positive")
    pool = SpeakerPool(cfg.speaker_pool_size, seed=master_seed)
    speech_dirs = DirectoryPool(cfg.speech_dir, cfg.sample_rate_hz) if cfg.speech_dir else None
    noise_dirs = DirectoryPool(cfg.noise_dir, cfg.sample_rate_hz) if cfg.noise_dir else None
    bundles, meta = [], []
    for i in range(count):
        seed = scenario_seed(master_seed, i)
        split = "validation" if i < cfg.validation_count else "train"
        spec = sample_scenario_spec(seed, cfg.sample_rate_hz, cfg.clip_len_s, cfg.p_nonlinear, cfg.p_noisy,
                                    (cfg.delay_min_ms, cfg.delay_max_ms))
        far, near, noise, m = _sources(seed, spec, split, cfg, pool, speech_dirs, noise_dirs)
        bundles.append(synthesize_scenario(spec, far, near, noise))
        meta.append(m)
    return emit_manifest(bundles, out_dir, cfg.validation_count, cfg.format, meta)


# --------------------------------------------------------------------------
# process


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple[str, ...]
    weights_path: str | None = None
    nlms: NlmsConfig = field(default_factory=NlmsConfig)
    max_delay_ms: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("pipeline needs at least one stage")
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stage(s) {bad}; choose from {STAGES}")
        if len(set(self.stages)) != len(self.stages):
            raise ValueError("duplicate pipeline stage")
        if list(self.stages) != sorted(self.stages, key=STAGES.index):
            raise ValueError(f"stages must follow the order {STAGES}")
        if "neural" in self.stages and not self.weights_path:
            raise ValueError("neural stage requires a weights file")

    @classmethod
    def parse(cls, text: str, **kw) -> "PipelineSpec":
        return cls(tuple(s.strip() for s in text.split(",") if s.strip()), **kw)


def stft_config_for(model_cfg: ModelConfig) -> StftConfig:
    """Frame = DFT size, 50% hop, matching the model's bin count."""
    dft = 2 * (model_cfg.num_bins - 1)
    return StftConfig(dft, dft // 2, dft)


def run_pipeline(mic: AudioClip, far: AudioClip, spec: PipelineSpec, weights=None) -> tuple[AudioClip, dict]:
    """Run the stages on processing-rate clips; returns the output and stage info."""
    info = {}
    out, ref = mic, far
    if "delay_align" in spec.stages:
        try:
            d = estimate_delay(mic, far, spec.max_delay_ms)
            ref = align(far, d)
            info["delay_ms"] = d
        except NoEchoDetected:
            info["delay_ms"] = None
    if "nlms" in spec.stages:
        out, _ = nlms_process(out, ref, spec.nlms)
    if "neural" in spec.stages:
        out = enhance(out, ref, weights, stft_config_for(weights.config))
    return out, info


def _process_one(args):
    rec, root, out_dir, spec = args
    weights = load_weights(spec.weights_path) if "neural" in spec.stages else None
    mic = read_wav(Path(root) / rec["files"]["mic"])
    far = read_wav(Path(root) / rec["files"]["farend"])
    src_rate = mic.sample_rate_hz
    t0 = time.perf_counter()
    out, info = run_pipeline(resample(mic, PROCESSING_RATE), resample(far, PROCESSING_RATE), spec, weights)
    elapsed = time.perf_counter() - t0
    out = resample(out, src_rate)
    n = len(mic)
    samples = np.zeros(n)
    samples[:min(n, len(out))] = out.samples[:n]
    write_wav(AudioClip(samples, src_rate), Path(out_dir) / f"{rec['id']}_processed.wav")
    return {"id": rec["id"], "processing_s": elapsed, "duration_s": mic.duration_s,
            "rtf": elapsed / mic.duration_s, **info}


def machine_info() -> dict:
    return {"platform": platform.platform(), "machine": platform.machine(),
            "processor": platform.processor(), "cpu_count": os.cpu_count(),
            "python": platform.python_version()}


def cmd_process(manifest, pipeline: PipelineSpec, out_dir, workers: int = 1) -> dict:
    """Process every manifest row; writes ``{id}_processed.wav`` and ``process_log.json``."""
    manifest = Path(manifest)
    root = manifest if manifest.is_dir() else manifest.parent
    records = read_manifest(manifest)
    if "neural" in pipeline.stages and not Path(pipeline.weights_path).exists():
        raise FileNotFoundError(f"weights file not found: {pipeline.weights_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(rec, root, out_dir, pipeline) for rec in records]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_process_one, jobs))
    else:
        rows = [_process_one(j) for j in jobs]
    doc = {"pipeline": {"stages": list(pipeline.stages), "weights": pipeline.weights_path,
                        "nlms": asdict(pipeline.nlms)},
           "rows": rows, "machine": machine_info()}
    (out_dir / "process_log.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


# --------------------------------------------------------------------------
# score


def cmd_score(manifest, processed_dir, endpoint: str | None, kinds=("fest", "nest", "dt"),
              out_path=None, **client_kw) -> dict:
    """Submit every processed clip under each scenario kind and average per field.

    Unreachable service or unparseable answers mark the clip (and any
    field left without values) as unavailable; the batch always completes.
    """
    manifest = Path(manifest)
    root = manifest if manifest.is_dir() else manifest.parent
    processed_dir = Path(processed_dir)
    rows, acc = [], {k: [] for k in SCORE_FIELDS}
    for rec in read_manifest(manifest):
        for kind in kinds:
            row = {"id": rec["id"], "kind": kind}
            try:
                res = score_client_submit(endpoint, root / rec["files"]["farend"], root / rec["files"]["mic"],
                                          processed_dir / f"{rec['id']}_processed.wav", kind, **client_kw)
            except ScoreParseError as exc:
                row.update(status=UNAVAILABLE, error=str(exc))
                rows.append(row)
                continue
            if res == UNAVAILABLE:
                row["status"] = UNAVAILABLE
            else:
                row.update(status="ok", **res)
                if kind == "nest":
                    acc["ne_st_mos"].append(res["mos"])
                elif kind == "fest":
                    acc["fe_st_echo_dmos"].append(res["echo_dmos"])
                else:
                    acc["dt_echo_dmos"].append(res["echo_dmos"])
                    acc["dt_other_dmos"].append(res["other_dmos"])
            rows.append(row)
    doc = {k: (float(np.mean(v)) if v else UNAVAILABLE) for k, v in acc.items()}
    doc["per_clip"] = rows
    if out_path is not None:
        Path(out_path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


# --------------------------------------------------------------------------
# evaluate


@dataclass
class EvalOptions:
    region: str = "fest"
    transcripts: str | None = None
    scores: str | dict | None = None
    process_log: str | None = None
    dt_fraction: float = 2.0 / 3.0


def _erle_mask(rec, mic: AudioClip, near: AudioClip, region: str, dt_fraction: float):
    n = len(mic)
    if region == "full":
        a, b = 0, n
        span = (0.0, mic.duration_s)
    else:
        span = eval_region(mic.duration_s, region, dt_fraction)
        a, b = int(round(span[0] * mic.sample_rate_hz)), int(round(span[1] * mic.sample_rate_hz))
    if b > n:
        raise ValueError(f"region {span} exceeds clip {rec['id']}")
    mask = np.zeros(n, dtype=bool)
    mask[a:b] = True
    # ERLE is only meaningful where the near end is silent
    mask &= near.samples == 0.0
    return mask, span


def _load_scores(scores) -> dict | None:
    if scores is None:
        return None
    if isinstance(scores, dict):
        return scores
    return json.loads(Path(scores).read_text())


def cmd_evaluate(manifest, processed_dir, options: EvalOptions | None = None, out_path=None) -> dict:
    opts = options or EvalOptions()
    manifest = Path(manifest)
    root = manifest if manifest.is_dir() else manifest.parent
    processed_dir = Path(processed_dir)
    records = read_manifest(manifest)
    ids = [r["id"] for r in records]

    refs = hyps = None
    missing_tx: set[str] = set()
    if opts.transcripts:
        refs, m1 = transcript_client(Path(opts.transcripts) / "ref", ids)
        hyps, m2 = transcript_client(Path(opts.transcripts) / "hyp", ids)
        missing_tx = set(m1) | set(m2)
    timing = {}
    log_path = Path(opts.process_log) if opts.process_log else processed_dir / "process_log.json"
    if log_path.exists():
        timing = {r["id"]: r for r in json.loads(log_path.read_text())["rows"]}

    rows = []
    for rec in records:
        p = processed_dir / f"{rec['id']}_processed.wav"
        if not p.exists():
            raise FileNotFoundError(f"missing processed file {p}")
        processed = read_wav(p)
        mic = read_wav(root / rec["files"]["mic"])
        near = read_wav(root / rec["files"]["nearend"])
        if len(processed) != len(mic):
            raise ValueError(f"{p}: length {len(processed)} != mic length {len(mic)}")
        mask, span = _erle_mask(rec, mic, near, opts.region, opts.dt_fraction)
        row = {"id": rec["id"], "split": rec["split"], "region": opts.region,
               "region_s": [span[0], span[1]], "erle_samples": int(mask.sum())}
        e = None
        if mask.any() and np.any(mic.samples[mask] != 0):
            e = erle_db(mic, processed, mask)
        row["erle_infinite"] = e == math.inf
        row["erle_db"] = e if e is not None and math.isfinite(e) else None
        if refs is not None:
            if rec["id"] in missing_tx:
                row["wacc"], row["wacc_missing"] = None, True
            else:
                row["wacc"], row["wacc_missing"] = wacc(refs[rec["id"]], hyps[rec["id"]]), False
        if rec["id"] in timing:
            row["rtf"] = timing[rec["id"]]["rtf"]
        rows.append(row)

    agg = {"n_clips": len(rows)}
    finite = [r["erle_db"] for r in rows if r["erle_db"] is not None]
    agg["mean_erle_db"] = float(np.mean(finite)) if finite else None
    agg["n_erle_finite"] = len(finite)
    agg["n_erle_infinite"] = sum(r["erle_infinite"] for r in rows)
    if refs is not None:
        w = [r["wacc"] for r in rows if r.get("wacc") is not None]
        agg["mean_wacc"] = float(np.mean(w)) if w else None
        agg["n_wacc_missing"] = sum(r["wacc_missing"] for r in rows)
    rtfs = [r["rtf"] for r in rows if "rtf" in r]
    if rtfs:
        agg["mean_rtf"] = float(np.mean(rtfs))

    scores = _load_scores(opts.scores)
    if scores is not None:
        fields_ = {k: scores.get(k, UNAVAILABLE) for k in SCORE_FIELDS}
        wa = scores.get("wacc", agg.get("mean_wacc"))
        fields_["wacc"] = wa if wa is not None else UNAVAILABLE
        agg["challenge_scores"] = fields_
        if any(v == UNAVAILABLE for v in fields_.values()):
            agg["M"] = UNAVAILABLE
        else:
            agg["M"] = challenge_metric(ChallengeScores(**{k: float(v) for k, v in fields_.items()}))

    report = {"rows": rows, "aggregate": agg}
    if timing:
        report["machine"] = json.loads(log_path.read_text()).get("machine", {})
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def strip_timing(obj):
    """Copy of a report without wall-clock fields, for determinism comparisons."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def format_table(report: dict) -> str:
    lines = [f"{'id':>8} {'split':>10} {'ERLE dB':>9} {'WAcc':>6} {'RTF':>7}"]
    for r in report["rows"]:
        erle = "inf" if r["erle_infinite"] else ("-" if r["erle_db"] is None else f"{r['erle_db']:.2f}")
        wa = "-" if r.get("wacc") is None else f"{r['wacc']:.3f}"
        rtf = "-" if "rtf" not in r else f"{r['rtf']:.3f}"
        lines.append(f"{r['id']:>8} {r['split']:>10} {erle:>9} {wa:>6} {rtf:>7}")
    agg = report["aggregate"]
    lines.append("")
    for k in sorted(agg):
        if k != "challenge_scores":
            v = agg[k]
            lines.append(f"{k:>16}: {v:.4f}" if isinstance(v, float) else f"{k:>16}: {v}")
    return "\n".join(lines)
