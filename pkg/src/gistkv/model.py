"""Minimal decoder-only transformer with arbitrary attention masks.

Plain numpy, analytic gradients, no batching tricks beyond padding. The
architecture is pre-norm residual blocks with RMS normalization, multi-head
attention, a ReLU MLP, additive sinusoidal position encodings indexed by
absolute position, and a learned unembedding.

Two execution paths share the same arithmetic:

* `forward` / `loss_and_grads`: whole-sequence passes under a dense boolean
  mask (training and oracles).
* `forward_incremental`: block-append passes against per-layer key/value
  caches with explicit per-row visibility sets (inference). Masked keys get
  -inf scores, so evicted or invisible entries contribute exactly zero.
"""
from __future__ import annotations

import dataclasses

import numpy as np

_NORM_EPS = 1e-6


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_positions: int
    dtype: str = "float32"  # "float32" or "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic init: weights ~ N(0, 1/d_model), norm gains = 1."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(cfg.d_model)
    dt = cfg.np_dtype

    def w(*shape):
        return (rng.standard_normal(shape) * scale).astype(dt)

    params: dict[str, np.ndarray] = {
        "embed": w(cfg.vocab_size, cfg.d_model),
        "unembed": w(cfg.d_model, cfg.vocab_size),
        "ln_f": np.ones(cfg.d_model, dtype=dt),
    }
    for i in range(cfg.n_layers):
        p = f"L{i}."
        params[p + "wq"] = w(cfg.d_model, cfg.d_model)
        params[p + "wk"] = w(cfg.d_model, cfg.d_model)
        params[p + "wv"] = w(cfg.d_model, cfg.d_model)
        params[p + "wo"] = w(cfg.d_model, cfg.d_model)
        params[p + "ln1"] = np.ones(cfg.d_model, dtype=dt)
        params[p + "ln2"] = np.ones(cfg.d_model, dtype=dt)
        params[p + "w1"] = w(cfg.d_model, cfg.d_ff)
        params[p + "w2"] = w(cfg.d_ff, cfg.d_model)
    return params


def positional_encoding(positions: np.ndarray, d_model: int, dtype) -> np.ndarray:
    """Sinusoidal encodings indexed by absolute position."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    half = d_model // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = pos * freqs
    pe = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if pe.shape[-1] < d_model:  # odd d_model
        pe = np.concatenate([pe, np.zeros(pe.shape[:-1] + (1,))], axis=-1)
    return pe.astype(dtype)


def _rms_norm(x: np.ndarray, g: np.ndarray):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    xh = x * inv
    return xh * g, (xh, inv)


def _rms_norm_bwd(dout: np.ndarray, g: np.ndarray, saved):
    xh, inv = saved
    dxh = dout * g
    dg = np.sum(dout * xh, axis=tuple(range(dout.ndim - 1)))
    dx = inv * (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True))
    return dx, dg


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    # (..., n, d) -> (..., H, n, dh)
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, n_heads, d // n_heads)
    return np.moveaxis(x, -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # (..., H, n, dh) -> (..., n, d)
    x = np.moveaxis(x, -3, -2)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def _masked_softmax(scores: np.ndarray, allow: np.ndarray) -> np.ndarray:
    """Row softmax with masked entries at exactly zero weight.

    `allow` broadcasts against `scores`; every row must keep at least one key.
    """
    if not np.all(np.any(allow, axis=-1)):
        raise ValueError("attention row with zero allowed keys")
    neg = np.where(allow, scores, -np.inf)
    m = np.max(neg, axis=-1, keepdims=True)
    e = np.exp(neg - m)
    e = np.where(allow, e, 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def masked_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, allow: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Head-split masked attention.

    q: (H, b, dh); k, v: (H, m, dh); allow: (b, m) bool.
    Returns (context (H, b, dh), probabilities (H, b, m)).
    """
    dh = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(dh)
    p = _masked_softmax(scores, allow[None, :, :])
    return p @ v, p


def forward(
    params: dict,
    cfg: ModelConfig,
    tokens: np.ndarray,
    positions: np.ndarray,
    allow: np.ndarray,
) -> np.ndarray:
    """Logits (n, vocab) for a single sequence under a dense mask."""
    logits, _ = _forward_batch(
        params,
        cfg,
        np.asarray(tokens)[None, :],
        np.asarray(positions)[None, :],
        np.asarray(allow)[None, :, :],
    )
    return logits[0]


def _forward_batch(params, cfg, tokens, positions, allow):
    """Batched forward pass; returns (logits (B,n,V), saved intermediates)."""
    B, n = tokens.shape
    if np.max(positions) >= cfg.max_positions:
        raise ValueError("position exceeds max_positions")
    dt = cfg.np_dtype
    x = params["embed"][tokens] + positional_encoding(positions, cfg.d_model, dt)
    saved = {"tokens": tokens, "x0": x, "layers": []}
    inv_sqrt = 1.0 / np.sqrt(cfg.d_head)
    for i in range(cfg.n_layers):
        p = f"L{i}."
        a, ln1_saved = _rms_norm(x, params[p + "ln1"])
        q = _split_heads(a @ params[p + "wq"], cfg.n_heads)  # (B,H,n,dh)
        k = _split_heads(a @ params[p + "wk"], cfg.n_heads)
        v = _split_heads(a @ params[p + "wv"], cfg.n_heads)
        scores = (q @ np.swapaxes(k, -1, -2)) * inv_sqrt
        probs = _masked_softmax(scores, allow[:, None, :, :])
        ctx = _merge_heads(probs @ v)  # (B,n,d)
        attn_out = ctx @ params[p + "wo"]
        x1 = x + attn_out
        b, ln2_saved = _rms_norm(x1, params[p + "ln2"])
        h = b @ params[p + "w1"]
        hr = np.maximum(h, 0.0)
        f = hr @ params[p + "w2"]
        x2 = x1 + f
        saved["layers"].append(
            dict(
                x_in=x, a=a, ln1=ln1_saved, q=q, k=k, v=v, probs=probs,
                ctx=ctx, x1=x1, b=b, ln2=ln2_saved, h=h, hr=hr,
            )
        )
        x = x2
    y, lnf_saved = _rms_norm(x, params["ln_f"])
    saved["x_final"] = x
    saved["y"] = y
    saved["ln_f"] = lnf_saved
    logits = y @ params["unembed"]
    return logits, saved


def _backward_batch(params, cfg, saved, dlogits):
    """Gradients for every parameter given d loss / d logits."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    y = saved["y"]
    grads["unembed"] += np.tensordot(y, dlogits, axes=([0, 1], [0, 1]))
    dy = dlogits @ params["unembed"].T
    dx, dg = _rms_norm_bwd(dy, params["ln_f"], saved["ln_f"])
    grads["ln_f"] += dg
    inv_sqrt = 1.0 / np.sqrt(cfg.d_head)
    for i in reversed(range(cfg.n_layers)):
        p = f"L{i}."
        s = saved["layers"][i]
        # MLP branch
        df = dx
        grads[p + "w2"] += np.tensordot(s["hr"], df, axes=([0, 1], [0, 1]))
        dhr = df @ params[p + "w2"].T
        dh = dhr * (s["h"] > 0)
        grads[p + "w1"] += np.tensordot(s["b"], dh, axes=([0, 1], [0, 1]))
        db = dh @ params[p + "w1"].T
        dx1, dg2 = _rms_norm_bwd(db, params[p + "ln2"], s["ln2"])
        grads[p + "ln2"] += dg2
        dx1 = dx1 + dx  # residual
        # attention branch
        dattn_out = dx1
        grads[p + "wo"] += np.tensordot(s["ctx"], dattn_out, axes=([0, 1], [0, 1]))
        dctx = _split_heads(dattn_out @ params[p + "wo"].T, cfg.n_heads)
        probs = s["probs"]
        dprobs = dctx @ np.swapaxes(s["v"], -1, -2)
        dv = np.swapaxes(probs, -1, -2) @ dctx
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dq = (dscores @ s["k"]) * inv_sqrt
        dk = (np.swapaxes(dscores, -1, -2) @ s["q"]) * inv_sqrt
        da = (
            _merge_heads(dq) @ params[p + "wq"].T
            + _merge_heads(dk) @ params[p + "wk"].T
            + _merge_heads(dv) @ params[p + "wv"].T
        )
        a = s["a"]
        grads[p + "wq"] += np.tensordot(a, _merge_heads(dq), axes=([0, 1], [0, 1]))
        grads[p + "wk"] += np.tensordot(a, _merge_heads(dk), axes=([0, 1], [0, 1]))
        grads[p + "wv"] += np.tensordot(a, _merge_heads(dv), axes=([0, 1], [0, 1]))
        dx_in, dg1 = _rms_norm_bwd(da, params[p + "ln1"], s["ln1"])
        grads[p + "ln1"] += dg1
        dx = dx_in + dx1  # residual
    np.add.at(grads["embed"], saved["tokens"], dx)
    return grads


def _nll_and_dlogits(logits, targets, include):
    """Mean next-token NLL over included positions, plus d loss / d logits."""
    count = int(np.sum(include))
    if count == 0:
        raise ValueError("loss mask excludes every position")
    m = np.max(logits, axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -np.sum(picked * include) / count
    soft = np.exp(logp)
    onehot = np.zeros_like(soft)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    dlogits = (soft - onehot) * include[..., None] / count
    return loss, dlogits


def loss_and_grads(
    params: dict,
    cfg: ModelConfig,
    tokens: np.ndarray,
    positions: np.ndarray,
    allow: np.ndarray,
    loss_mask: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Single-sequence mean NLL over masked positions and full gradients."""
    return loss_and_grads_batch(
        params,
        cfg,
        np.asarray(tokens)[None, :],
        np.asarray(positions)[None, :],
        np.asarray(allow)[None, :, :],
        np.asarray(loss_mask)[None, :],
    )


def loss_and_grads_batch(params, cfg, tokens, positions, allow, loss_mask):
    """Batched variant. Pad rows must carry loss_mask=False and a
    self-only attention row; they then contribute nothing to loss or grads."""
    logits, saved = _forward_batch(params, cfg, tokens, positions, allow)
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    include = np.asarray(loss_mask, dtype=cfg.np_dtype)
    include[:, -1] = 0.0  # final position has no target
    loss, dlogits = _nll_and_dlogits(logits, targets, include)
    grads = _backward_batch(params, cfg, saved, dlogits)
    return float(loss), grads


@dataclasses.dataclass
class LayerKV:
    """Per-layer key/value store, head-split: arrays of shape (H, m, dh)."""

    k: np.ndarray
    v: np.ndarray

    @property
    def length(self) -> int:
        return self.k.shape[1]


def empty_caches(cfg: ModelConfig) -> list[LayerKV]:
    dt = cfg.np_dtype
    return [
        LayerKV(
            k=np.zeros((cfg.n_heads, 0, cfg.d_head), dtype=dt),
            v=np.zeros((cfg.n_heads, 0, cfg.d_head), dtype=dt),
        )
        for _ in range(cfg.n_layers)
    ]


def forward_incremental(
    params: dict,
    cfg: ModelConfig,
    caches: list[LayerKV],
    new_tokens: np.ndarray,
    new_positions: np.ndarray,
    visible_sets: list[np.ndarray],
) -> tuple[np.ndarray, list[LayerKV], np.ndarray]:
    """Append a block of tokens against live caches.

    visible_sets[j] lists the key indices row j may attend: cache entries are
    0..m-1, earlier block tokens are m..m+j-1, and m+j is the row itself.
    Returns (logits (b, vocab), per-layer new KV for the block, and the
    attention mass received per key (m + b,), summed over heads and rows and
    averaged over layers).
    """
    b = len(new_tokens)
    m = caches[0].length
    dt = cfg.np_dtype
    allow = np.zeros((b, m + b), dtype=bool)
    for j, vis in enumerate(visible_sets):
        vis = np.asarray(vis, dtype=np.int64)
        if vis.size and (vis.min() < 0 or vis.max() > m + j):
            raise ValueError("dangling visible index")
        allow[j, vis] = True
        allow[j, m + j] = True
    tokens = np.asarray(new_tokens)
    x = params["embed"][tokens] + positional_encoding(
        np.asarray(new_positions), cfg.d_model, dt
    )
    if np.max(new_positions) >= cfg.max_positions:
        raise ValueError("position exceeds max_positions")
    received = np.zeros(m + b, dtype=np.float64)
    new_kv: list[LayerKV] = []
    for i in range(cfg.n_layers):
        p = f"L{i}."
        a, _ = _rms_norm(x, params[p + "ln1"])
        q = _split_heads(a @ params[p + "wq"], cfg.n_heads)  # (H,b,dh)
        k_new = _split_heads(a @ params[p + "wk"], cfg.n_heads)
        v_new = _split_heads(a @ params[p + "wv"], cfg.n_heads)
        k_all = np.concatenate([caches[i].k, k_new], axis=1)
        v_all = np.concatenate([caches[i].v, v_new], axis=1)
        ctx, probs = masked_attention(q, k_all, v_all, allow)
        received += np.sum(probs, axis=(0, 1))
        x = x + _merge_heads(ctx) @ params[p + "wo"]
        bn, _ = _rms_norm(x, params[p + "ln2"])
        x = x + np.maximum(bn @ params[p + "w1"], 0.0) @ params[p + "w2"]
        new_kv.append(LayerKV(k=k_new, v=v_new))
    y, _ = _rms_norm(x, params["ln_f"])
    logits = y @ params["unembed"]
    return logits, new_kv, received / cfg.n_layers


def cast_params(params: dict, cfg: ModelConfig) -> dict:
    """Cast all parameter arrays to the config dtype."""
    return {k: v.astype(cfg.np_dtype) for k, v in params.items()}
