"""Autoregressive generation with a live, evictable KV cache.

Three policies:

* VanillaPolicy: plain causal decoding, nothing evicted.
* CompressPolicy: the dynamic-compression loop. Thought tokens are decoded
  against the full live cache; on trigger (delimiter emitted, or a fixed
  token count) the cache-token block is appended while the thought is still
  live, the thought entries are then physically evicted, the output token is
  appended, and decoding resumes from its logits. An EOS stops generation
  immediately; the final segment is never compressed.
* HeavyHitterPolicy: training-free budgeted eviction. When appending a token
  would exceed the budget, the non-local entry with the lowest accumulated
  attention mass is evicted first, so each forward sees at most `budget`
  keys including the new token. Scores accumulate post-softmax probability
  mass summed over heads and averaged over layers; the most recent
  `local_size` entries are never evicted.

Every forward appends one record per token to a GenerationTrace, from which
the dependency and peak metrics are computed.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .corpus import (
    ROLE_CACHE,
    ROLE_OUTPUT,
    ROLE_QUESTION,
    ROLE_THOUGHT,
    Vocab,
)
from .masks import MaskMode
from .model import LayerKV, ModelConfig, empty_caches, forward_incremental

EVENT_EOS = "eos"
EVENT_BUDGET = "budget_exhausted"


@dataclasses.dataclass(frozen=True)
class VanillaPolicy:
    pass


@dataclasses.dataclass(frozen=True)
class CompressPolicy:
    cache_size: int
    trigger: str = "delimiter"  # "delimiter" or "every_n"
    chunk_len: int = 0
    mask_mode: MaskMode = MaskMode.THOUGHT_CACHE

    def __post_init__(self):
        if self.trigger not in ("delimiter", "every_n"):
            raise ValueError(f"unknown trigger {self.trigger}")
        if self.trigger == "every_n" and self.chunk_len < 1:
            raise ValueError("every_n trigger needs chunk_len >= 1")
        if self.cache_size < 1:
            raise ValueError("cache_size must be >= 1")


@dataclasses.dataclass(frozen=True)
class HeavyHitterPolicy:
    budget: int
    local_size: int

    def __post_init__(self):
        if not (0 < self.local_size < self.budget):
            raise ValueError("need 0 < local_size < budget")


GenPolicy = VanillaPolicy | CompressPolicy | HeavyHitterPolicy


@dataclasses.dataclass
class GenerationTrace:
    """Per-token record of every autoregressive forward after the prompt."""

    prompt_len: int
    tokens: np.ndarray  # emitted or appended token ids
    roles: np.ndarray
    thoughts: np.ndarray
    positions: np.ndarray
    live_before: np.ndarray  # live cache entries when this token's forward ran
    visible_keys: np.ndarray  # keys attended, self included
    evicted_after: np.ndarray  # entries evicted right after this forward
    stop_event: str = EVENT_EOS

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def generated(self) -> int:
        return len(self.tokens)

    def to_records(self) -> list[dict]:
        return [
            {
                "token": int(self.tokens[i]),
                "role": int(self.roles[i]),
                "thought": int(self.thoughts[i]),
                "position": int(self.positions[i]),
                "live_before": int(self.live_before[i]),
                "visible_keys": int(self.visible_keys[i]),
                "evicted": int(self.evicted_after[i]),
            }
            for i in range(len(self))
        ]


class _TraceBuilder:
    def __init__(self, prompt_len: int):
        self.prompt_len = prompt_len
        self.rows: list[tuple] = []

    def add(self, token, role, thought, position, live_before, visible, evicted=0):
        self.rows.append((token, role, thought, position, live_before, visible, evicted))

    def mark_eviction(self, count: int) -> None:
        t = self.rows[-1]
        self.rows[-1] = t[:6] + (t[6] + count,)

    def build(self, stop_event: str) -> GenerationTrace:
        cols = list(zip(*self.rows)) if self.rows else [[]] * 7
        return GenerationTrace(
            prompt_len=self.prompt_len,
            tokens=np.asarray(cols[0], dtype=np.int64),
            roles=np.asarray(cols[1], dtype=np.int64),
            thoughts=np.asarray(cols[2], dtype=np.int64),
            positions=np.asarray(cols[3], dtype=np.int64),
            live_before=np.asarray(cols[4], dtype=np.int64),
            visible_keys=np.asarray(cols[5], dtype=np.int64),
            evicted_after=np.asarray(cols[6], dtype=np.int64),
            stop_event=stop_event,
        )


class KVCacheState:
    """Live cache: per-layer keys/values plus per-entry metadata.

    Eviction removes entries from every layer at once; absolute positions are
    never reused or re-indexed.
    """

    def __init__(self, cfg: ModelConfig):
        self.caches: list[LayerKV] = empty_caches(cfg)
        self.roles = np.zeros(0, dtype=np.int64)
        self.thoughts = np.zeros(0, dtype=np.int64)
        self.positions = np.zeros(0, dtype=np.int64)
        self.scores = np.zeros(0, dtype=np.float64)

    @property
    def live(self) -> int:
        return len(self.roles)

    def append(self, new_kv: list[LayerKV], roles, thoughts, positions) -> None:
        for cache, kv in zip(self.caches, new_kv):
            cache.k = np.concatenate([cache.k, kv.k], axis=1)
            cache.v = np.concatenate([cache.v, kv.v], axis=1)
        self.roles = np.concatenate([self.roles, np.asarray(roles, dtype=np.int64)])
        self.thoughts = np.concatenate(
            [self.thoughts, np.asarray(thoughts, dtype=np.int64)]
        )
        self.positions = np.concatenate(
            [self.positions, np.asarray(positions, dtype=np.int64)]
        )
        self.scores = np.concatenate([self.scores, np.zeros(len(roles))])

    def evict(self, keep: np.ndarray) -> int:
        removed = int(np.sum(~keep))
        if removed == 0:
            return 0
        for cache in self.caches:
            cache.k = cache.k[:, keep, :]
            cache.v = cache.v[:, keep, :]
        self.roles = self.roles[keep]
        self.thoughts = self.thoughts[keep]
        self.positions = self.positions[keep]
        self.scores = self.scores[keep]
        return removed


def _greedy(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. ties break to the lowest id.
    return int(np.argmax(logits))


def _visible_live(
    mode: MaskMode, q_role: int, q_thought: int, state: KVCacheState
) -> np.ndarray:
    """Indices of live cache entries a query row may attend, per mask mode."""
    from .masks import _pair_allowed

    allowed = _pair_allowed(
        mode,
        np.asarray([q_role]),
        np.asarray([q_thought]),
        state.roles,
        state.thoughts,
        anchor_sees_question=False,
    )[0]
    return np.nonzero(allowed)[0]


def generate(
    params: dict,
    cfg: ModelConfig,
    vocab: Vocab,
    prompt: list[int],
    policy: GenPolicy,
    max_new: int = 10240,
    logit_sink: list | None = None,
) -> tuple[list[int], GenerationTrace]:
    """Greedy decoding under a cache policy.

    Returns the generated tokens (specials included, prompt excluded) and the
    trace. `max_new` bounds the number of content tokens (thought and answer
    tokens; cache/output specials are not counted against the budget).
    `logit_sink`, if given, collects the logits behind every greedy decision.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    state = KVCacheState(cfg)
    trace = _TraceBuilder(prompt_len=len(prompt))
    next_pos = 0

    # Prefill the prompt causally; no trace records for prompt tokens.
    n = len(prompt)
    vis = [np.arange(j) for j in range(n)]
    logits, new_kv, _ = forward_incremental(
        params, cfg, state.caches, np.asarray(prompt), np.arange(n), vis
    )
    state.append(new_kv, [ROLE_QUESTION] * n, [0] * n, np.arange(n))
    next_pos = n
    last_logits = logits[-1]

    output: list[int] = []
    if isinstance(policy, VanillaPolicy):
        stop = _decode_plain(
            params, cfg, vocab, state, trace, last_logits, output, max_new, next_pos,
            None, logit_sink,
        )
    elif isinstance(policy, HeavyHitterPolicy):
        stop = _decode_plain(
            params, cfg, vocab, state, trace, last_logits, output, max_new, next_pos,
            policy, logit_sink,
        )
    else:
        stop = _decode_compress(
            params, cfg, vocab, state, trace, last_logits, output, max_new, next_pos,
            policy, logit_sink,
        )
    return output, trace.build(stop)


def _step(params, cfg, state, token, position, vis, accumulate=False):
    logits, new_kv, received = forward_incremental(
        params, cfg, state.caches, np.asarray([token]), np.asarray([position]), [vis]
    )
    if accumulate:
        state.scores += received[: state.live]
    return logits[0], new_kv


def heavy_hitter_keep(scores: np.ndarray, local_size: int, n_evict: int) -> np.ndarray:
    """Keep mask dropping the `n_evict` lowest-score entries outside the
    local window (the `local_size` most recent entries are protected)."""
    live = len(scores)
    keep = np.ones(live, dtype=bool)
    protected = np.zeros(live, dtype=bool)
    protected[live - local_size :] = True
    for _ in range(n_evict):
        candidates = np.where(keep & ~protected)[0]
        victim = candidates[np.argmin(scores[candidates])]
        keep[victim] = False
    return keep


def _decode_plain(
    params, cfg, vocab, state, trace, last_logits, output, max_new, next_pos, policy,
    logit_sink=None,
):
    """Vanilla and heavy-hitter decoding: full visibility of the live cache."""
    thought_idx = 1
    for _ in range(max_new):
        if logit_sink is not None:
            logit_sink.append(last_logits.copy())
        token = _greedy(last_logits)
        if policy is not None and state.live >= policy.budget:
            # Evict before the forward so the context including the new
            # token stays within budget.
            n_evict = state.live - policy.budget + 1
            keep = heavy_hitter_keep(state.scores, policy.local_size, n_evict)
            evicted = state.evict(keep)
        else:
            evicted = 0
        live = state.live
        vis = np.arange(live)
        trace.add(token, ROLE_THOUGHT, thought_idx, next_pos, live, live + 1, evicted)
        last_logits, new_kv = _step(
            params, cfg, state, token, next_pos, vis, accumulate=policy is not None
        )
        state.append(new_kv, [ROLE_THOUGHT], [thought_idx], [next_pos])
        output.append(token)
        next_pos += 1
        if token == vocab.eos:
            return EVENT_EOS
    return EVENT_BUDGET


def _decode_compress(
    params, cfg, vocab, state, trace, last_logits, output, max_new, next_pos, policy,
    logit_sink=None,
):
    """The dynamic-compression loop."""
    mode = policy.mask_mode
    thought_idx = 1
    since_compress = 0
    budget = max_new
    while budget > 0:
        if logit_sink is not None:
            logit_sink.append(last_logits.copy())
        token = _greedy(last_logits)
        live = state.live
        vis = _visible_live(mode, ROLE_THOUGHT, thought_idx, state)
        trace.add(token, ROLE_THOUGHT, thought_idx, next_pos, live, len(vis) + 1)
        last_logits, new_kv = _step(params, cfg, state, token, next_pos, vis)
        state.append(new_kv, [ROLE_THOUGHT], [thought_idx], [next_pos])
        output.append(token)
        next_pos += 1
        budget -= 1
        since_compress += 1
        if token == vocab.eos:
            return EVENT_EOS  # the final segment is never compressed
        fire = (
            policy.trigger == "delimiter" and token == vocab.delimiter
        ) or (policy.trigger == "every_n" and since_compress >= policy.chunk_len)
        if not fire:
            continue
        # Compression: cache block (thought still live), evict, output token.
        for ctok in vocab.cache_tokens:
            live = state.live
            vis = _visible_live(mode, ROLE_CACHE, thought_idx, state)
            trace.add(ctok, ROLE_CACHE, thought_idx, next_pos, live, len(vis) + 1)
            _, new_kv = _step(params, cfg, state, ctok, next_pos, vis)
            state.append(new_kv, [ROLE_CACHE], [thought_idx], [next_pos])
            output.append(ctok)
            next_pos += 1
        keep = ~((state.roles == ROLE_THOUGHT) & (state.thoughts == thought_idx))
        removed = state.evict(keep)
        trace.mark_eviction(removed)
        live = state.live
        vis = _visible_live(mode, ROLE_OUTPUT, thought_idx, state)
        otok = vocab.output_token
        trace.add(otok, ROLE_OUTPUT, thought_idx, next_pos, live, len(vis) + 1)
        last_logits, new_kv = _step(params, cfg, state, otok, next_pos, vis)
        state.append(new_kv, [ROLE_OUTPUT], [thought_idx], [next_pos])
        output.append(otok)
        next_pos += 1
        thought_idx += 1
        since_compress = 0
    return EVENT_BUDGET


def grade(output: list[int], truth: int, vocab: Vocab) -> bool:
    """Final-answer grading: the digit span after the last delimiter.

    Non-digit tokens in the span are ignored (normalized compare); a missing
    span or missing digit grades incorrect.
    """
    delim_positions = [i for i, t in enumerate(output) if t == vocab.delimiter]
    if not delim_positions:
        return False
    span = output[delim_positions[-1] + 1 :]
    digits = [t for t in span if 0 <= t <= 9]
    if not digits:
        return False
    return digits[-1] == truth


def simulate_trace(
    policy: GenPolicy,
    prompt_len: int,
    n_output: int,
) -> GenerationTrace:
    """Mechanics-only trace: cache bookkeeping without a neural model.

    Emits `n_output` content tokens (the last standing in for EOS) under the
    policy's eviction schedule. Token ids are placeholders; roles, live
    sizes, visibility counts and evictions are exact.
    """
    tb = _TraceBuilder(prompt_len=prompt_len)
    pos = prompt_len
    if isinstance(policy, (VanillaPolicy, HeavyHitterPolicy)):
        t = np.arange(n_output, dtype=np.int64)
        live = prompt_len + t
        evicted = np.zeros(n_output, dtype=np.int64)
        if isinstance(policy, HeavyHitterPolicy):
            # evict-before-forward: live context is capped one below budget
            capped = np.minimum(live, policy.budget - 1)
            evicted[1:] = (live - capped)[1:] - (live - capped)[:-1]
            evicted[0] = live[0] - capped[0]
            live = capped
        return GenerationTrace(
            prompt_len=prompt_len,
            tokens=np.zeros(n_output, dtype=np.int64),
            roles=np.full(n_output, ROLE_THOUGHT, dtype=np.int64),
            thoughts=np.ones(n_output, dtype=np.int64),
            positions=prompt_len + t,
            live_before=live,
            visible_keys=live + 1,
            evicted_after=evicted,
            stop_event=EVENT_EOS,
        )
    # Compression policy, fixed-count trigger only (mechanical runs have no
    # delimiter semantics).
    if policy.trigger != "every_n":
        raise ValueError("mechanical simulation needs an every_n trigger")
    live = prompt_len
    since = 0
    thought = 1
    emitted = 0
    while emitted < n_output:
        tb.add(0, ROLE_THOUGHT, thought, pos, live, live + 1)
        live += 1
        pos += 1
        emitted += 1
        since += 1
        if emitted == n_output:
            break  # EOS: final partial segment is not compressed
        if since >= policy.chunk_len:
            for _ in range(policy.cache_size):
                tb.add(0, ROLE_CACHE, thought, pos, live, live + 1)
                live += 1
                pos += 1
            tb.mark_eviction(policy.chunk_len)
            live -= policy.chunk_len
            tb.add(0, ROLE_OUTPUT, thought, pos, live, live + 1)
            live += 1
            pos += 1
            thought += 1
            since = 0
    return tb.build(EVENT_EOS)
