"""GRU spectral-mask estimator with exact backpropagation through time.

Gate convention (fixed because weight files depend on it)::

    z  = sigmoid(x W_z^T + h U_z^T + b_z)          update gate
    r  = sigmoid(x W_r^T + h U_r^T + b_r)          reset gate
    hc = tanh(x W_h^T + (r * h) U_h^T + b_h)       candidate
    h' = (1 - z) * h + z * hc

The reset gate multiplies the previous state *before* the recurrent
product.  A fully connected layer with sigmoid output maps the last GRU
layer's state to a per-bin mask.  All arrays are float64; shapes are
``(B, T, D)`` internally and ``(T, D)`` accepted at the API.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..audio import AudioClip, Spectrogram, StftConfig, istft, log_power_features, stft

GATES = ("z", "r", "h")


@dataclass(frozen=True)
class ModelConfig:
    num_bins: int = 161
    hidden_dim: int = 322
    num_gru_layers: int = 2
    feature_norm: bool = False
    floor_eps: float = 1e-12

    def __post_init__(self):
        if self.num_bins < 1 or self.hidden_dim < 1 or self.num_gru_layers < 1:
            raise ValueError(f"invalid model config {self}")

    @property
    def input_dim(self) -> int:
        return 2 * self.num_bins

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.hidden_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        H = self.hidden_dim
        for l in range(self.num_gru_layers):
            I = self.layer_input_dim(l)
            for g in GATES:
                out[f"gru{l}.W_{g}"] = (H, I)
            for g in GATES:
                out[f"gru{l}.U_{g}"] = (H, H)
            for g in GATES:
                out[f"gru{l}.b_{g}"] = (H,)
        out["fc.W"] = (self.num_bins, H)
        out["fc.b"] = (self.num_bins,)
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


class ModelWeights:
    """Named tensors for a :class:`ModelConfig`; also used for gradients and optimizer moments."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        shapes = config.shapes()
        if set(tensors) != set(shapes):
            missing, extra = set(shapes) - set(tensors), set(tensors) - set(shapes)
            raise ValueError(f"tensor names mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        self.config = config
        self.tensors = {}
        for name, shape in shapes.items():
            a = np.asarray(tensors[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name}: shape {a.shape} does not match config {shape}")
            self.tensors[name] = a

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelWeights":
        return cls(config, {k: np.zeros(s) for k, s in config.shapes().items()})

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelWeights":
        """Uniform(+-1/sqrt(fan_in)) weights, orthogonal recurrent matrices, zero biases."""
        rng = np.random.default_rng(seed)
        t = {}
        for name, shape in config.shapes().items():
            if ".b" in name:
                t[name] = np.zeros(shape)
            elif ".U_" in name:
                q, _ = np.linalg.qr(rng.standard_normal(shape))
                t[name] = q
            else:
                bound = 1.0 / np.sqrt(shape[1])
                t[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, t)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelWeights":
        return ModelWeights.zeros(self.config)

    def param_count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v ** 2) for v in self.tensors.values())))

    def allclose(self, other: "ModelWeights", **kw) -> bool:
        return all(np.allclose(v, other[k], **kw) for k, v in self.items())

    def equal(self, other: "ModelWeights") -> bool:
        return self.config == other.config and all(np.array_equal(v, other[k]) for k, v in self.items())


# --------------------------------------------------------------------------
# Features and masking


def assemble_features(mic_spec: Spectrogram, far_spec: Spectrogram, eps: float = 1e-12,
                      normalize: bool = False) -> np.ndarray:
    """Row ``t`` is ``[log_power(mic)_t, log_power(far)_t]``."""
    if mic_spec.frames.shape != far_spec.frames.shape or mic_spec.config != far_spec.config:
        raise ValueError(
            f"spectrogram mismatch: mic {mic_spec.frames.shape} vs far {far_spec.frames.shape}")
    feats = np.concatenate([log_power_features(mic_spec, eps), log_power_features(far_spec, eps)], axis=1)
    if normalize:
        feats = (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-8)
    return feats


def apply_mask(mic_spec: Spectrogram, mask: np.ndarray) -> Spectrogram:
    """Scale the mic magnitudes by ``mask``, keeping the mic phase."""
    if mask.shape != mic_spec.frames.shape:
        raise ValueError(f"mask {mask.shape} does not match spectrogram {mic_spec.frames.shape}")
    return Spectrogram(mic_spec.frames * mask, mic_spec.config, mic_spec.sample_rate_hz,
                       mic_spec.num_samples)


def mse_loss(enhanced_mag: np.ndarray, clean_mag: np.ndarray) -> float:
    if enhanced_mag.shape != clean_mag.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((enhanced_mag - clean_mag) ** 2))


def loss_gradient(mask: np.ndarray, mic_mag: np.ndarray, clean_mag: np.ndarray) -> np.ndarray:
    """d(mse_loss(mask * mic_mag, clean_mag)) / d(mask)."""
    return 2.0 * (mask * mic_mag - clean_mag) * mic_mag / mask.size


# --------------------------------------------------------------------------
# Forward / backward


def _as_batch(a: np.ndarray) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None], True
    if a.ndim == 3:
        return a, False
    raise ValueError(f"expected (T, D) or (B, T, D), got shape {a.shape}")


def _layer_forward(x, w: ModelWeights, l: int):
    B, T, _ = x.shape
    p = f"gru{l}."
    H = w.config.hidden_dim
    Uz, Ur, Uh = w[p + "U_z"], w[p + "U_r"], w[p + "U_h"]
    xz = x @ w[p + "W_z"].T + w[p + "b_z"]
    xr = x @ w[p + "W_r"].T + w[p + "b_r"]
    xh = x @ w[p + "W_h"].T + w[p + "b_h"]
    hs = np.empty((B, T + 1, H))
    hs[:, 0] = 0.0
    z = np.empty((B, T, H))
    r = np.empty((B, T, H))
    hc = np.empty((B, T, H))
    for t in range(T):
        h = hs[:, t]
        z[:, t] = expit(xz[:, t] + h @ Uz.T)
        r[:, t] = expit(xr[:, t] + h @ Ur.T)
        hc[:, t] = np.tanh(xh[:, t] + (r[:, t] * h) @ Uh.T)
        hs[:, t + 1] = (1.0 - z[:, t]) * h + z[:, t] * hc[:, t]
    return hs, z, r, hc


def _forward(features, w: ModelWeights):
    x, _ = _as_batch(features)
    if x.shape[-1] != w.config.input_dim:
        raise ValueError(f"feature width {x.shape[-1]} != model input {w.config.input_dim}")
    caches = []
    for l in range(w.config.num_gru_layers):
        hs, z, r, hc = _layer_forward(x, w, l)
        caches.append((x, hs, z, r, hc))
        x = hs[:, 1:]
    mask = expit(x @ w["fc.W"].T + w["fc.b"])
    return mask, caches


def gru_forward(features: np.ndarray, weights: ModelWeights) -> tuple[np.ndarray, list[np.ndarray]]:
    """Mask ``(T, num_bins)`` and each layer's hidden states ``(T, hidden)``.

    Batched input ``(B, T, D)`` gives batched outputs.  Initial state is zero.
    """
    x, single = _as_batch(features)
    mask, caches = _forward(x, weights)
    if not np.all(np.isfinite(mask)):
        raise FloatingPointError("non-finite activation in GRU forward pass")
    hidden = [c[1][:, 1:] for c in caches]
    if single:
        return mask[0], [h[0] for h in hidden]
    return mask, hidden


def _layer_backward(dh_out, cache, w: ModelWeights, l: int, grads: dict):
    x, hs, z, r, hc = cache
    B, T, H = z.shape
    p = f"gru{l}."
    Wz, Wr, Wh = w[p + "W_z"], w[p + "W_r"], w[p + "W_h"]
    Uz, Ur, Uh = w[p + "U_z"], w[p + "U_r"], w[p + "U_h"]
    dz_pre = np.empty((B, T, H))
    dr_pre = np.empty((B, T, H))
    dh_pre = np.empty((B, T, H))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev = hs[:, t]
        dh = dh_out[:, t] + dh_next
        zt, rt, hct = z[:, t], r[:, t], hc[:, t]
        dhc = dh * zt
        dz = dh * (hct - h_prev)
        dh_prev = dh * (1.0 - zt)
        dah = dhc * (1.0 - hct ** 2)
        drh = dah @ Uh
        dr = drh * h_prev
        dh_prev += drh * rt
        daz = dz * zt * (1.0 - zt)
        dar = dr * rt * (1.0 - rt)
        dh_prev += daz @ Uz + dar @ Ur
        dz_pre[:, t], dr_pre[:, t], dh_pre[:, t] = daz, dar, dah
        dh_next = dh_prev
    h_prev_all = hs[:, :-1]
    for g, d in zip(GATES, (dz_pre, dr_pre, dh_pre)):
        grads[p + f"W_{g}"] = np.einsum("bth,bti->hi", d, x)
        grads[p + f"b_{g}"] = d.sum(axis=(0, 1))
    grads[p + "U_z"] = np.einsum("bth,btk->hk", dz_pre, h_prev_all)
    grads[p + "U_r"] = np.einsum("bth,btk->hk", dr_pre, h_prev_all)
    grads[p + "U_h"] = np.einsum("bth,btk->hk", dh_pre, r * h_prev_all)
    return dz_pre @ Wz + dr_pre @ Wr + dh_pre @ Wh


def backprop(features, weights: ModelWeights, mic_mag, clean_mag) -> tuple[float, ModelWeights]:
    """Loss and exact gradients of ``mse_loss(mask * mic_mag, clean_mag)``.

    The loss averages over every batch, frame and bin entry.
    """
    x, _ = _as_batch(features)
    mic_mag, _ = _as_batch(mic_mag)
    clean_mag, _ = _as_batch(clean_mag)
    if x.shape[1] < 1:
        raise ValueError("sequence length must be at least 1")
    mask, caches = _forward(x, weights)
    if mask.shape != mic_mag.shape or mic_mag.shape != clean_mag.shape:
        raise ValueError(f"shape mismatch: mask {mask.shape}, mic {mic_mag.shape}, clean {clean_mag.shape}")
    err = mask * mic_mag - clean_mag
    loss = float(np.mean(err ** 2))
    dmask = 2.0 * err * mic_mag / err.size
    dpre = dmask * mask * (1.0 - mask)
    h_top = caches[-1][1][:, 1:]
    grads = {
        "fc.W": np.einsum("btf,bth->fh", dpre, h_top),
        "fc.b": dpre.sum(axis=(0, 1)),
    }
    dh = dpre @ weights["fc.W"]
    for l in range(weights.config.num_gru_layers - 1, -1, -1):
        dh = _layer_backward(dh, caches[l], weights, l, grads)
    out = ModelWeights(weights.config, grads)
    if not np.isfinite(loss) or not out.is_finite():
        raise FloatingPointError("non-finite loss or gradient")
    return loss, out


# --------------------------------------------------------------------------
# Inference pipeline


def features_for(mic: AudioClip, far: AudioClip, stft_cfg: StftConfig, model_cfg: ModelConfig):
    """Mic spectrogram and assembled features for a clip pair."""
    ms, fs = stft(mic, stft_cfg), stft(far, stft_cfg)
    if ms.frames.shape[1] != model_cfg.num_bins:
        raise ValueError(f"STFT gives {ms.frames.shape[1]} bins, model expects {model_cfg.num_bins}")
    return ms, assemble_features(ms, fs, model_cfg.floor_eps, model_cfg.feature_norm)


def enhance(mic: AudioClip, far: AudioClip, weights: ModelWeights, cfg: StftConfig | None = None) -> AudioClip:
    """STFT, mask estimation, masking and overlap-add resynthesis.

    Inputs must already be at the model rate and aligned.  Output has the
    input length; samples past the last full frame are zero.
    """
    cfg = cfg or StftConfig()
    if mic.sample_rate_hz != far.sample_rate_hz or len(mic) != len(far):
        raise ValueError("mic and far end must share rate and length")
    ms, feats = features_for(mic, far, cfg, weights.config)
    mask, _ = gru_forward(feats, weights)
    return istft(apply_mask(ms, mask), len(mic))
