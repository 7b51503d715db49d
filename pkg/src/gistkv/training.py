"""Supervised training over augmented layouts, plus checkpoint IO.

The objective is plain next-token NLL restricted by the loss mask (question,
cache and output targets contribute nothing), under the mask mode's
visibility matrix. Schedule: linear warmup to the peak rate over
warmup_ratio of the run, then cosine decay to zero. Optimizer: Adam with
default moment constants.

Batches are padded to the batch maximum; pad rows attend only themselves and
are excluded from the loss, so padding cannot leak.
"""
from __future__ import annotations

import dataclasses
import json
import time
import zipfile

import numpy as np

from .corpus import (
    RawSample,
    SequenceLayout,
    Vocab,
    build_layout,
    build_loss_mask,
    seg_thought_level,
    seg_token_level,
)
from .masks import MaskMode, build_mask
from .model import ModelConfig, init_params, loss_and_grads_batch

CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learn_rate: float
    warmup_ratio: float
    max_length: int
    seed: int
    mask_mode: MaskMode
    cache_size: int
    segmentation: str = "thought"  # "thought" or "token"
    chunk_len: int = 6
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.segmentation not in ("thought", "token"):
            raise ValueError(f"unknown segmentation {self.segmentation}")


@dataclasses.dataclass
class TrainReport:
    losses: list[float]
    lrs: list[float]
    eval_losses: list[float]
    wall_s: float


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> learn_rate, then cosine decay to 0 at total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError("step outside schedule")
    warmup = cfg.warmup_ratio * total_steps
    if warmup > 0 and step < warmup:
        return cfg.learn_rate * step / warmup
    span = total_steps - warmup
    if span <= 0:
        return 0.0
    frac = (step - warmup) / span
    return cfg.learn_rate * 0.5 * (1.0 + np.cos(np.pi * frac))


def make_layouts(
    samples: list[RawSample], vocab: Vocab, cfg: TrainConfig
) -> list[SequenceLayout]:
    """Segment and augment each sample per the configured strategy.

    The plain causal baseline uses a single segment (no specials inserted),
    so the same layout machinery serves every mode.
    """
    layouts = []
    for s in samples:
        if cfg.mask_mode is MaskMode.VANILLA:
            segments = [list(s.answer_chain)]
        elif cfg.segmentation == "thought":
            segments = seg_thought_level(s.answer_chain, vocab.delimiter)
        else:
            segments = seg_token_level(s.answer_chain, cfg.chunk_len)
        layout = build_layout(s.question, segments, vocab)
        if len(layout) > cfg.max_length:
            raise ValueError(
                f"layout of length {len(layout)} exceeds max_length {cfg.max_length}"
            )
        layouts.append(layout)
    return layouts


def _batch_arrays(layouts, vocab, mode):
    """Pad a list of layouts into batched token/position/mask arrays."""
    n = max(len(l) for l in layouts)
    B = len(layouts)
    tokens = np.full((B, n), vocab.pad, dtype=np.int64)
    positions = np.zeros((B, n), dtype=np.int64)
    allow = np.zeros((B, n, n), dtype=bool)
    loss_mask = np.zeros((B, n), dtype=bool)
    for b, layout in enumerate(layouts):
        m = len(layout)
        tokens[b, :m] = layout.tokens
        positions[b, :m] = layout.positions
        allow[b, :m, :m] = build_mask(layout, mode).allow
        loss_mask[b, :m] = build_loss_mask(layout)
    # pad rows: self-only attention keeps softmax defined
    idx = np.arange(n)
    allow[:, idx, idx] = True
    return tokens, positions, allow, loss_mask


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(
        self, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0
    ):
        self.t += 1
        b1t = 1.0 - beta1**self.t
        b2t = 1.0 - beta2**self.t
        for key in params:
            g = grads[key]
            self.m[key] = beta1 * self.m[key] + (1 - beta1) * g
            self.v[key] = beta2 * self.v[key] + (1 - beta2) * g * g
            mhat = self.m[key] / b1t
            vhat = self.v[key] / b2t
            upd = lr * mhat / (np.sqrt(vhat) + eps)
            if weight_decay and params[key].ndim > 1:  # decoupled; skip norm gains
                upd = upd + lr * weight_decay * params[key]
            params[key] -= upd.astype(params[key].dtype)


def eval_loss(params, model_cfg, layouts, vocab, mode, batch_size=32) -> float:
    """Mean masked NLL over a layout set (no gradient updates)."""
    from .model import _forward_batch, _nll_and_dlogits

    total, count = 0.0, 0
    for i in range(0, len(layouts), batch_size):
        chunk = layouts[i : i + batch_size]
        tokens, positions, allow, loss_mask = _batch_arrays(chunk, vocab, mode)
        logits, _ = _forward_batch(params, model_cfg, tokens, positions, allow)
        targets = np.zeros_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        include = loss_mask.astype(model_cfg.np_dtype)
        include[:, -1] = 0.0
        loss, _ = _nll_and_dlogits(logits, targets, include)
        n_inc = int(np.sum(include))
        total += loss * n_inc
        count += n_inc
    return total / max(count, 1)


def train(
    samples: list[RawSample],
    vocab: Vocab,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    eval_samples: list[RawSample] | None = None,
    params: dict | None = None,
    log_every: int = 0,
) -> tuple[dict, TrainReport]:
    """Train from scratch (or continue from `params`); deterministic per seed."""
    if not samples:
        raise ValueError("corpus is empty")
    t0 = time.monotonic()
    layouts = make_layouts(samples, vocab, train_cfg)
    eval_layouts = (
        make_layouts(eval_samples, vocab, train_cfg) if eval_samples else None
    )
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    opt = AdamState(params)
    rng = np.random.default_rng(train_cfg.seed + 1)
    n = len(layouts)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = max(train_cfg.epochs * steps_per_epoch, 1)
    losses, lrs, eval_losses = [], [], []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, train_cfg.batch_size):
            batch = [layouts[j] for j in order[i : i + train_cfg.batch_size]]
            tokens, positions, allow, loss_mask = _batch_arrays(
                batch, vocab, train_cfg.mask_mode
            )
            loss, grads = loss_and_grads_batch(
                params, model_cfg, tokens, positions, allow, loss_mask
            )
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss diverged at step {step}")
            lr = lr_at(step, total_steps, train_cfg)
            opt.step(params, grads, lr, weight_decay=train_cfg.weight_decay)
            losses.append(float(loss))
            lrs.append(float(lr))
            step += 1
            if log_every and step % log_every == 0:
                print(f"step {step}/{total_steps} loss {loss:.4f} lr {lr:.2e}")
        if eval_layouts:
            eval_losses.append(
                eval_loss(params, model_cfg, eval_layouts, vocab, train_cfg.mask_mode)
            )
    report = TrainReport(
        losses=losses, lrs=lrs, eval_losses=eval_losses, wall_s=time.monotonic() - t0
    )
    return params, report


def save_checkpoint(
    path, params: dict, model_cfg: ModelConfig, train_cfg: TrainConfig
) -> None:
    """Versioned container: config JSON plus named parameter arrays."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": model_cfg.to_dict(),
        "mask_mode": train_cfg.mask_mode.value,
        "cache_size": train_cfg.cache_size,
        "segmentation": train_cfg.segmentation,
        "chunk_len": train_cfg.chunk_len,
    }
    arrays = {f"param.{k}": v for k, v in params.items()}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, expect_cache_size: int | None = None):
    """Load (params, model_cfg, meta); rejects version mismatches, corrupt
    files, and cache-size mismatches (the cache-token count is fixed at
    training time and must stay consistent at inference)."""
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            params = {
                k[len("param.") :]: data[k] for k in data.files if k.startswith("param.")
            }
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise ValueError(f"corrupt checkpoint container: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    if expect_cache_size is not None and meta["cache_size"] != expect_cache_size:
        raise ValueError(
            f"checkpoint was trained with cache_size={meta['cache_size']}, "
            f"requested {expect_cache_size}"
        )
    model_cfg = ModelConfig.from_dict(meta["model"])
    return params, model_cfg, meta
