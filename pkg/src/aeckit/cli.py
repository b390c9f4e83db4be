"""Command line entry point: ``aeckit {generate,process,evaluate,score,train}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .linear import NlmsConfig
from .service import ENDPOINT_ENV


def _section(args, name):
    return harness.load_config(args.config).get(name, {}) if args.config else {}


def _generate(args):
    cfg = harness.GenerateConfig.from_section(_section(args, "generate"))
    if args.rate:
        cfg.sample_rate_hz = args.rate
    if args.validation is not None:
        cfg.validation_count = args.validation
    path = harness.cmd_generate(args.seed, args.count, args.out, cfg)
    print(f"wrote {args.count} scenarios to {path}")


def _process(args):
    sec = _section(args, "process")
    nlms = NlmsConfig(
        num_taps=int(sec.get("num_taps", NlmsConfig.num_taps)),
        step_size=float(sec.get("step_size", NlmsConfig.step_size)),
        regularization_eps=float(sec.get("regularization_eps", NlmsConfig.regularization_eps)),
    )
    spec = harness.PipelineSpec.parse(args.pipeline or sec.get("pipeline", "delay_align,nlms"),
                                      weights_path=args.weights or sec.get("weights"), nlms=nlms,
                                      max_delay_ms=float(sec.get("max_delay_ms", 1000.0)))
    doc = harness.cmd_process(args.manifest, spec, args.out, workers=args.workers)
    rtf = sum(r["rtf"] for r in doc["rows"]) / len(doc["rows"])
    print(f"processed {len(doc['rows'])} clips, mean real-time factor {rtf:.3f}")


def _evaluate(args):
    sec = _section(args, "evaluate")
    opts = harness.EvalOptions(region=args.region or sec.get("region", "fest"),
                               transcripts=args.transcripts or sec.get("transcripts"),
                               scores=args.scores or sec.get("scores"))
    out = args.out or str(Path(args.processed) / "report.json")
    report = harness.cmd_evaluate(args.manifest, args.processed, opts, out)
    print(harness.format_table(report))
    print(f"\nreport written to {out}")


def _score(args):
    kinds = tuple(k.strip() for k in args.kinds.split(","))
    out = args.out or str(Path(args.processed) / "scores.json")
    doc = harness.cmd_score(args.manifest, args.processed, args.endpoint, kinds, out)
    print(json.dumps({k: v for k, v in doc.items() if k != "per_clip"}, indent=1))


def _train(args):
    from .neural import ModelConfig, TrainConfig, save_weights, train
    from .synth import load_manifest, read_manifest

    records = read_manifest(args.manifest)
    bundles = load_manifest(args.manifest)
    tr = [b for b, r in zip(bundles, records) if r["split"] == "train"] or bundles
    va = [b for b, r in zip(bundles, records) if r["split"] == "validation"] or None
    mcfg = ModelConfig(num_bins=args.bins, hidden_dim=args.hidden)
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, max_epochs=args.epochs, seed=args.seed)
    res = train(tr, tcfg, mcfg, harness.stft_config_for(mcfg), validation=va)
    save_weights(res.weights, args.out)
    print(f"initial loss {res.initial_loss:.6g}, final loss {res.final_loss:.6g}, weights -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aeckit", description=__doc__)
    p.add_argument("--config", help="INI config file with [generate]/[process]/[evaluate] sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize echo scenarios and a manifest")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--rate", type=int, choices=(16000, 48000))
    g.add_argument("--validation", type=int, help="number of leading rows marked validation")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_generate)

    pr = sub.add_parser("process", help="run an echo-cancellation pipeline over a manifest")
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--pipeline", help="comma-separated stages from delay_align,nlms,neural")
    pr.add_argument("--weights")
    pr.add_argument("--workers", type=int, default=1)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=_process)

    e = sub.add_parser("evaluate", help="compute ERLE / WAcc / M over processed clips")
    e.add_argument("--manifest", required=True)
    e.add_argument("--processed", required=True)
    e.add_argument("--region", choices=("fest", "dt", "nest", "full"))
    e.add_argument("--transcripts", help="directory with ref/{id}.txt and hyp/{id}.txt")
    e.add_argument("--scores", help="scores JSON (as written by `score`)")
    e.add_argument("--out")
    e.set_defaults(func=_evaluate)

    s = sub.add_parser("score", help="query an external MOS scoring service")
    s.add_argument("--manifest", required=True)
    s.add_argument("--processed", required=True)
    s.add_argument("--endpoint", help=f"service URL (default: ${ENDPOINT_ENV}; none = offline)")
    s.add_argument("--kinds", default="fest,nest,dt")
    s.add_argument("--out")
    s.set_defaults(func=_score)

    t = sub.add_parser("train", help="train the mask estimator on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--bins", type=int, default=161)
    t.add_argument("--hidden", type=int, default=322)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=_train)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"aeckit: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
