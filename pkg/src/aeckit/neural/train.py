"""Training loop for the mask estimator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..audio import StftConfig, stft
from ..linear import align, estimate_delay, NoEchoDetected
from .model import ModelConfig, ModelWeights, assemble_features, backprop, gru_forward
from .optim import AdamState, TrainConfig, adam_step

log = logging.getLogger(__name__)


@dataclass
class Example:
    features: np.ndarray  # (T, 2F)
    mic_mag: np.ndarray   # (T, F)
    clean_mag: np.ndarray  # (T, F)


@dataclass
class TrainResult:
    weights: ModelWeights
    loss_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    best_epoch: int = -1


def prepare_example(bundle, stft_cfg: StftConfig, model_cfg: ModelConfig, alignment: str = "truth") -> Example:
    """Features from mic + far end, target = clean near-end magnitude on the mic STFT grid.

    ``alignment`` is ``"truth"`` (shift the far end by the scenario's bulk
    delay), ``"estimate"`` (GCC-PHAT) or ``"none"``.
    """
    far = bundle.far_end
    if alignment == "truth":
        far = align(far, bundle.spec.extra_delay_ms)
    elif alignment == "estimate":
        try:
            far = align(far, estimate_delay(bundle.mic, far))
        except NoEchoDetected:
            pass
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")
    ms = stft(bundle.mic, stft_cfg)
    fs = stft(far, stft_cfg)
    cs = stft(bundle.near_end_speech, stft_cfg)
    if ms.frames.shape[1] != model_cfg.num_bins:
        raise ValueError(f"STFT gives {ms.frames.shape[1]} bins, model expects {model_cfg.num_bins}")
    feats = assemble_features(ms, fs, model_cfg.floor_eps, model_cfg.feature_norm)
    return Example(feats, ms.magnitude(), cs.magnitude())


def _stack(examples: list[Example]):
    T = min(e.features.shape[0] for e in examples)
    return (np.stack([e.features[:T] for e in examples]),
            np.stack([e.mic_mag[:T] for e in examples]),
            np.stack([e.clean_mag[:T] for e in examples]))


def evaluate_loss(weights: ModelWeights, examples: list[Example]) -> float:
    total, count = 0.0, 0
    for e in examples:
        mask, _ = gru_forward(e.features, weights)
        total += float(np.sum((mask * e.mic_mag - e.clean_mag) ** 2))
        count += mask.size
    return total / count


def train(dataset, cfg: TrainConfig | None = None, model_cfg: ModelConfig | None = None,
          stft_cfg: StftConfig | None = None, validation=None, init: ModelWeights | None = None,
          alignment: str = "truth") -> TrainResult:
    """Minibatch Adam training over scenario bundles (or prepared :class:`Example` objects).

    Returns the weights with the lowest validation loss when a validation set
    is supplied, otherwise the lowest end-of-epoch training loss.
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    stft_cfg = stft_cfg or StftConfig()
    if not dataset:
        raise ValueError("empty training set")
    prep = lambda items: [x if isinstance(x, Example) else prepare_example(x, stft_cfg, model_cfg, alignment)  # noqa: E731
                          for x in items]
    train_set = prep(dataset)
    val_set = prep(validation) if validation else None
    w = init.copy() if init is not None else ModelWeights.init(model_cfg, cfg.seed)
    state = AdamState.for_weights(w)
    rng = np.random.default_rng(cfg.seed)

    result = TrainResult(w, initial_loss=evaluate_loss(w, train_set))
    best, best_w = np.inf, w
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            x, mic, clean = _stack([train_set[i] for i in order[s:s + cfg.batch_size]])
            loss, grads = backprop(x, w, mic, clean)
            if not np.isfinite(loss):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            w, state = adam_step(w, grads, state, cfg)
            losses.append(loss)
        result.loss_curve.append(float(np.mean(losses)))
        score = evaluate_loss(w, val_set) if val_set else evaluate_loss(w, train_set)
        if val_set:
            result.val_curve.append(score)
        if score < best:
            best, best_w, result.best_epoch = score, w, epoch
        log.debug("epoch %d loss %.6g score %.6g", epoch, result.loss_curve[-1], score)
    result.weights = best_w
    result.final_loss = evaluate_loss(best_w, train_set)
    return result
