"""Per-region traffic forecasting.

An encoder-decoder over scalar user-count sequences: the encoder stacks
sparse self-attention layers with halving feature-distillation blocks
(width-3 convolution, ELU, stride-2 max-pool); the decoder runs causal
self-attention over the recent window plus placeholder positions, then
cross-attention into the encoder output; a two-layer head maps each
placeholder position to a predicted count.

All gradients are hand-derived reverse mode in float64; selection indices
(top-u queries, max-pool argmax) are treated as constants.  Simple
persistence / moving-average baselines live here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import DivergenceError
from .nn import AdamState, activation

_ELU, _DELU = activation("elu")


# ---------------------------------------------------------------------------
# Series container and encoder/decoder input assembly
# ---------------------------------------------------------------------------

@dataclass
class TrafficSeries:
    """User counts per (region, long slot), plus windowing defaults."""

    counts: np.ndarray
    history_window: int = 64  # most recent slots fed to the encoder
    current_window: int = 8   # recent slots prefixed to the decoder input

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.ndim != 2:
            raise ValueError(f"counts must be (regions, slots), got shape {self.counts.shape}")
        if self.counts.size and np.any(self.counts < 0):
            raise ValueError("user counts must be nonnegative")
        if self.history_window < 1 or self.current_window < 1:
            raise ValueError("windows must be at least 1 slot")

    @property
    def num_regions(self) -> int:
        return self.counts.shape[0]

    @property
    def num_slots(self) -> int:
        return self.counts.shape[1]


def build_io(series: TrafficSeries, horizon: int):
    """Encoder input (recent history) and decoder input (current window
    followed by a zero placeholder of length ``horizon``)."""
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if series.num_slots < 1:
        raise ValueError("cannot build model inputs from an empty history")
    x_en = series.counts[:, -series.history_window:]
    x_cur = series.counts[:, -series.current_window:]
    placeholder = np.zeros((series.num_regions, horizon))
    x_de = np.concatenate([x_cur, placeholder], axis=1)
    return x_en, x_de


# ---------------------------------------------------------------------------
# Attention primitives (single sequence, single head)
# ---------------------------------------------------------------------------

def _softmax_rows(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sparsity_measure(scores: np.ndarray) -> np.ndarray:
    """Per-query activity score: max over keys minus the mean over keys."""
    return scores.max(axis=1) - scores.mean(axis=1)


def top_u_queries(scores: np.ndarray, u: int) -> np.ndarray:
    """Indices of the u most active queries; ties broken by lower index."""
    order = np.argsort(-sparsity_measure(scores), kind="stable")
    return np.sort(order[:u])


def _probsparse_forward(Q, K, V, u):
    L_q, d = Q.shape
    scores = Q @ K.T / math.sqrt(d)
    sel = top_u_queries(scores, u)
    attn = _softmax_rows(scores[sel])
    out = np.tile(V.mean(axis=0), (L_q, 1))
    out[sel] = attn @ V
    return out, (Q, K, V, sel, attn)


def _probsparse_backward(cache, d_out):
    Q, K, V, sel, attn = cache
    L_q, d = Q.shape
    L_k = K.shape[0]
    scale = 1.0 / math.sqrt(d)
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    # Selected rows: softmax attention.
    d_sel = d_out[sel]
    dV += attn.T @ d_sel
    d_attn = d_sel @ V.T
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
    dQ[sel] = d_scores @ K * scale
    dK += d_scores.T @ Q[sel] * scale
    # Remaining rows emit the column mean of V.
    mask = np.ones(L_q, dtype=bool)
    mask[sel] = False
    if mask.any():
        dV += np.tile(d_out[mask].sum(axis=0) / L_k, (L_k, 1))
    return dQ, dK, dV


def probsparse_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, u: int) -> np.ndarray:
    """Sparse attention: full softmax rows for the top-u queries ranked by
    the max-minus-mean activity of their key scores; all other query rows
    output the column mean of V."""
    Q, K, V = (np.asarray(m, dtype=float) for m in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be matrices")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ValueError(
            f"incompatible shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if not 1 <= u <= Q.shape[0]:
        raise ValueError(f"query budget u={u} outside [1, {Q.shape[0]}]")
    out, _ = _probsparse_forward(Q, K, V, u)
    return out


def _masked_forward(Q, K, V):
    """Causal dense attention: query i attends keys 0..i."""
    L, d = Q.shape
    scores = Q @ K.T / math.sqrt(d)
    scores = np.where(np.triu(np.ones((L, L), dtype=bool), k=1), -np.inf, scores)
    attn = _softmax_rows(scores)
    return attn @ V, (Q, K, V, attn)


def _masked_backward(cache, d_out):
    Q, K, V, attn = cache
    scale = 1.0 / math.sqrt(Q.shape[1])
    dV = attn.T @ d_out
    d_attn = d_out @ V.T
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
    dQ = d_scores @ K * scale
    dK = d_scores.T @ Q * scale
    return dQ, dK, dV


# ---------------------------------------------------------------------------
# Distillation block: width-3 convolution, ELU, stride-2 max-pool
# ---------------------------------------------------------------------------

def _conv1d_forward(x, kernel, bias):
    """Same-padded width-3 convolution over time; x is (L, d_in)."""
    L = x.shape[0]
    pad = np.vstack([np.zeros((1, x.shape[1])), x, np.zeros((1, x.shape[1]))])
    y = np.tile(bias, (L, 1))
    for k in range(3):
        y += pad[k:k + L] @ kernel[k]
    return y, pad


def _conv1d_backward(pad, kernel, d_y):
    L = d_y.shape[0]
    d_kernel = np.zeros_like(kernel)
    d_pad = np.zeros_like(pad)
    for k in range(3):
        d_kernel[k] = pad[k:k + L].T @ d_y
        d_pad[k:k + L] += d_y @ kernel[k].T
    return d_kernel, d_y.sum(axis=0), d_pad[1:-1]


def _maxpool_forward(x):
    """Width-2 stride-2 max over time; odd tails pass through."""
    L, d = x.shape
    L_even = (L // 2) * 2
    pairs = x[:L_even].reshape(-1, 2, d)
    arg = pairs.argmax(axis=1)
    out = pairs.max(axis=1)
    if L % 2:
        out = np.vstack([out, x[-1:]])
    return out, (L, arg)


def _maxpool_backward(cache, d_out):
    L, arg = cache
    d = d_out.shape[1]
    dx = np.zeros((L, d))
    n_pairs = arg.shape[0]
    if n_pairs:
        # Pool windows are disjoint, so plain fancy-index assignment suffices.
        rows = 2 * np.arange(n_pairs)[:, None] + arg
        dx[rows, np.arange(d)[None, :]] = d_out[:n_pairs]
    if L % 2:
        dx[-1] = d_out[-1]
    return dx


def distill_block(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Halve a feature sequence: convolution, ELU, max-pool.

    x is (L, channels) with L >= 2; output has ceil(L/2) rows."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"distill_block needs (L>=2, channels), got shape {x.shape}")
    y, _ = _conv1d_forward(x, kernel, bias)
    pooled, _ = _maxpool_forward(_ELU(y))
    return pooled


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class ForecastConfig:
    width: int = 32
    encoder_layers: int = 2
    topu_factor: float = 5.0
    head_hidden: int = 32
    history_window: int = 64
    current_window: int = 8


def _positional_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    dim = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / width)
    pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


class ForecastModel:
    """Encoder-decoder traffic predictor with named float64 parameters."""

    FORMAT = "forecaster"

    def __init__(self, config: ForecastConfig, rng: np.random.Generator):
        self.config = config
        d = config.width
        self.params: dict = {}
        self.adam = AdamState()

        def init(name, shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[name] = rng.uniform(-bound, bound, size=shape)

        init("embed_w", (d,), 1)
        init("embed_b", (d,), 1)
        for i in range(config.encoder_layers):
            for proj in ("wq", "wk", "wv"):
                init(f"enc{i}_{proj}", (d, d), d)
            if i < config.encoder_layers - 1:
                init(f"dist{i}_kernel", (3, d, d), 3 * d)
                init(f"dist{i}_bias", (d,), 3 * d)
        for proj in ("wq", "wk", "wv"):
            init(f"dec_self_{proj}", (d, d), d)
            init(f"dec_cross_{proj}", (d, d), d)
        init("head_w0", (d, config.head_hidden), d)
        init("head_b0", (config.head_hidden,), d)
        init("head_w1", (config.head_hidden, 1), config.head_hidden)
        init("head_b1", (1,), config.head_hidden)
        # Normalization stats, learned from the training series.
        self.params["norm_mean"] = np.zeros(())
        self.params["norm_std"] = np.ones(())

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "format": self.FORMAT,
            "width": self.config.width,
            "encoder_layers": self.config.encoder_layers,
            "topu_factor": self.config.topu_factor,
            "head_hidden": self.config.head_hidden,
            "history_window": self.config.history_window,
            "current_window": self.config.current_window,
        }
        checkpoint.save_arrays(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "ForecastModel":
        arrays, meta = checkpoint.load_arrays(path)
        if meta.get("format") != cls.FORMAT:
            raise ValueError(f"{path}: not a forecaster checkpoint")
        config = ForecastConfig(
            width=meta["width"], encoder_layers=meta["encoder_layers"],
            topu_factor=meta["topu_factor"], head_hidden=meta["head_hidden"],
            history_window=meta["history_window"], current_window=meta["current_window"])
        model = cls(config, np.random.default_rng(0))
        model.params = arrays
        return model

    # -- internals -----------------------------------------------------------

    def _budget(self, length: int) -> int:
        u = math.ceil(self.config.topu_factor * math.log(max(length, 2)))
        return max(1, min(length, u))

    def _normalize(self, x):
        return (x - float(self.params["norm_mean"])) / float(self.params["norm_std"])

    def _denormalize(self, x):
        return x * float(self.params["norm_std"]) + float(self.params["norm_mean"])

    def _forward_region(self, x_en, x_de, want_cache=False):
        """One region's sequences -> per-decoder-position head outputs."""
        p = self.params
        cache = {}

        def embed(x):
            h = self._normalize(x)[:, None] * p["embed_w"][None, :] + p["embed_b"][None, :]
            return h + _positional_encoding(len(x), self.config.width)

        h = embed(x_en)
        enc_caches = []
        for i in range(self.config.encoder_layers):
            Q = h @ p[f"enc{i}_wq"]
            K = h @ p[f"enc{i}_wk"]
            V = h @ p[f"enc{i}_wv"]
            attn_out, attn_cache = _probsparse_forward(Q, K, V, self._budget(h.shape[0]))
            h_res = h + attn_out
            layer = {"h_in": h, "attn": attn_cache, "dist": None}
            h = h_res
            if i < self.config.encoder_layers - 1 and h.shape[0] >= 2:
                conv, pad = _conv1d_forward(h, p[f"dist{i}_kernel"], p[f"dist{i}_bias"])
                act = _ELU(conv)
                pooled, pool_cache = _maxpool_forward(act)
                layer["dist"] = (pad, conv, pool_cache)
                h = pooled
            enc_caches.append(layer)
        enc_out = h

        de = embed(x_de)
        Qs = de @ p["dec_self_wq"]
        Ks = de @ p["dec_self_wk"]
        Vs = de @ p["dec_self_wv"]
        self_out, self_cache = _masked_forward(Qs, Ks, Vs)
        dec = de + self_out
        Qc = dec @ p["dec_cross_wq"]
        Kc = enc_out @ p["dec_cross_wk"]
        Vc = enc_out @ p["dec_cross_wv"]
        cross_out, cross_cache = _probsparse_forward(
            Qc, Kc, Vc, self._budget(dec.shape[0]))
        fused = dec + cross_out

        z0 = fused @ p["head_w0"] + p["head_b0"]
        a0 = _ELU(z0)
        out = (a0 @ p["head_w1"] + p["head_b1"]).ravel()
        if not want_cache:
            return out
        cache.update(x_en=x_en, x_de=x_de, enc=enc_caches, enc_h=enc_out,
                     de=de, dec=dec, fused=fused, z0=z0, a0=a0,
                     self_cache=self_cache, cross_cache=cross_cache)
        return out, cache

    def _backward_region(self, cache, d_out, grads):
        """Accumulate parameter gradients for one region's forward pass."""
        p = self.params
        d_col = d_out[:, None]
        grads["head_b1"] += d_col.sum(axis=0)
        grads["head_w1"] += cache["a0"].T @ d_col
        d_a0 = d_col @ p["head_w1"].T
        d_z0 = d_a0 * _DELU(cache["z0"])
        grads["head_b0"] += d_z0.sum(axis=0)
        grads["head_w0"] += cache["fused"].T @ d_z0
        d_fused = d_z0 @ p["head_w0"].T

        # Cross attention (residual around it).
        d_dec = d_fused.copy()
        dQc, dKc, dVc = _probsparse_backward(cache["cross_cache"], d_fused)
        grads["dec_cross_wq"] += cache["dec"].T @ dQc
        grads["dec_cross_wk"] += cache["enc_h"].T @ dKc
        grads["dec_cross_wv"] += cache["enc_h"].T @ dVc
        d_dec += dQc @ p["dec_cross_wq"].T
        d_enc = dKc @ p["dec_cross_wk"].T + dVc @ p["dec_cross_wv"].T

        # Decoder self attention (residual).
        d_de = d_dec.copy()
        dQs, dKs, dVs = _masked_backward(cache["self_cache"], d_dec)
        grads["dec_self_wq"] += cache["de"].T @ dQs
        grads["dec_self_wk"] += cache["de"].T @ dKs
        grads["dec_self_wv"] += cache["de"].T @ dVs
        d_de += dQs @ p["dec_self_wq"].T + dKs @ p["dec_self_wk"].T + dVs @ p["dec_self_wv"].T
        self._backward_embed(cache["x_de"], d_de, grads)

        # Encoder stack, reversed.
        d_h = d_enc
        for i in reversed(range(self.config.encoder_layers)):
            layer = cache["enc"][i]
            if layer["dist"] is not None:
                pad, conv, pool_cache = layer["dist"]
                d_act = _maxpool_backward(pool_cache, d_h)
                d_conv = d_act * _DELU(conv)
                d_kernel, d_bias, d_h = _conv1d_backward(pad, p[f"dist{i}_kernel"], d_conv)
                grads[f"dist{i}_kernel"] += d_kernel
                grads[f"dist{i}_bias"] += d_bias
            d_in = d_h.copy()
            dQ, dK, dV = _probsparse_backward(layer["attn"], d_h)
            h_in = layer["h_in"]
            grads[f"enc{i}_wq"] += h_in.T @ dQ
            grads[f"enc{i}_wk"] += h_in.T @ dK
            grads[f"enc{i}_wv"] += h_in.T @ dV
            d_in += dQ @ p[f"enc{i}_wq"].T + dK @ p[f"enc{i}_wk"].T + dV @ p[f"enc{i}_wv"].T
            d_h = d_in
        self._backward_embed(cache["x_en"], d_h, grads)

    def _backward_embed(self, x, d_h, grads):
        xn = self._normalize(x)
        grads["embed_w"] += (xn[:, None] * d_h).sum(axis=0)
        grads["embed_b"] += d_h.sum(axis=0)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def forecast(model: ForecastModel, series: TrafficSeries, horizon: int) -> np.ndarray:
    """Predict the next ``horizon`` slots per region; clamped nonnegative."""
    if series.num_regions < 1:
        raise ValueError("series covers no regions")
    x_en, x_de = build_io(series, horizon)
    preds = np.empty((series.num_regions, horizon))
    for r in range(series.num_regions):
        out = model._forward_region(x_en[r], x_de[r])
        preds[r] = model._denormalize(out[-horizon:])
    return np.maximum(preds, 0.0)


def fit(model: ForecastModel, series: TrafficSeries, epochs: int, lr: float,
        horizon: int = 1, rng: np.random.Generator | None = None):
    """Squared-error training on sliding windows drawn from the series.

    Returns the per-epoch mean loss trace.  epochs == 0 leaves every
    parameter bit-identical.  A non-finite loss aborts with diagnostics.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        return []
    rng = rng if rng is not None else np.random.default_rng(0)
    counts = series.counts
    n_slots = series.num_slots
    start = max(2, series.current_window)
    cuts = [t for t in range(start, n_slots - horizon + 1)]
    if not cuts:
        raise ValueError(
            f"series too short to train on: {n_slots} slots, horizon {horizon}")
    model.params["norm_mean"] = np.asarray(counts.mean())
    model.params["norm_std"] = np.asarray(max(counts.std(), 1e-6))

    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(cuts))
        epoch_loss = 0.0
        for w in order:
            t = cuts[w]
            window = TrafficSeries(counts[:, :t],
                                   history_window=series.history_window,
                                   current_window=series.current_window)
            x_en, x_de = build_io(window, horizon)
            target = model._normalize(counts[:, t:t + horizon])
            grads = {name: np.zeros_like(arr) for name, arr in model.params.items()
                     if name not in ("norm_mean", "norm_std")}
            loss = 0.0
            denom = target.size
            for r in range(series.num_regions):
                out, cache = model._forward_region(x_en[r], x_de[r], want_cache=True)
                err = out[-horizon:] - target[r]
                loss += float(err @ err) / denom
                d_out = np.zeros_like(out)
                d_out[-horizon:] = 2.0 * err / denom
                model._backward_region(cache, d_out, grads)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at window {t}", curves=trace)
            model.adam.apply(model.params, grads, lr)
            epoch_loss += loss
        trace.append(epoch_loss / len(cuts))
    return trace


def baseline_forecast(series: TrafficSeries, horizon: int, kind: str = "persistence",
                      window: int = 2) -> np.ndarray:
    """Non-learned reference predictors.

    persistence repeats the last observed count; moving_average repeats the
    mean of the trailing ``window`` counts."""
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if series.num_slots == 0:
        raise ValueError("cannot forecast from an empty history")
    if kind == "persistence":
        level = series.counts[:, -1]
    elif kind == "moving_average":
        if series.num_slots < window:
            raise ValueError(
                f"moving average window {window} exceeds history {series.num_slots}")
        level = series.counts[:, -window:].mean(axis=1)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return np.tile(level[:, None], (1, horizon))
