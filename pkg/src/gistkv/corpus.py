"""Synthetic chained-arithmetic corpus and compression-ready sequence layouts.

Each sample is a multi-step modular arithmetic chain: the question lists an
initial value and a sequence of (op, operand) pairs, the answer chain
verbalizes one step per thought, and the final segment states the answer.
Every step's result is needed by the next step, so a compressed state must
carry the running value forward.

A training layout interleaves the question, thought segments, a block of
cache tokens, and an output token:

    X ++ S_1 ++ [c_1..c_n] ++ [o] ++ S_2 ++ ... ++ S_k

with per-position role tags used by the mask builder and the loss mask.
"""
from __future__ import annotations

import dataclasses
import json

import numpy as np

# Role codes shared across the package.
ROLE_QUESTION = 0
ROLE_THOUGHT = 1
ROLE_CACHE = 2
ROLE_OUTPUT = 3

ROLE_NAMES = {
    ROLE_QUESTION: "question",
    ROLE_THOUGHT: "thought",
    ROLE_CACHE: "cache",
    ROLE_OUTPUT: "output",
}


@dataclasses.dataclass(frozen=True)
class Vocab:
    """Token id space: content symbols plus the compression specials.

    The delimiter is itself a content symbol (it lives inside thoughts and is
    loss-bearing); the cache tokens, the output token, eos and pad get fresh
    ids after the content block.
    """

    symbols: tuple[int, ...]
    cache_tokens: tuple[int, ...]
    output_token: int
    delimiter: int
    eos: int
    pad: int

    @property
    def size(self) -> int:
        return len(self.symbols) + len(self.cache_tokens) + 3

    @property
    def cache_size(self) -> int:
        return len(self.cache_tokens)


def make_vocab(n_content: int, cache_size: int) -> Vocab:
    """Build a dense id space with `n_content` symbols and the specials."""
    if n_content < 16:
        raise ValueError(f"need at least 16 content symbols, got {n_content}")
    if cache_size < 1:
        raise ValueError("cache_size must be >= 1")
    symbols = tuple(range(n_content))
    cache = tuple(range(n_content, n_content + cache_size))
    output = n_content + cache_size
    return Vocab(
        symbols=symbols,
        cache_tokens=cache,
        output_token=output,
        delimiter=symbols[-1],
        eos=output + 1,
        pad=output + 2,
    )


# Fixed meanings of content symbol slots for the arithmetic task.
# Digits occupy slots 0..9; the delimiter is the last content symbol.
TOK_PLUS = 10
TOK_MINUS = 11
TOK_EQUALS = 12
TOK_QMARK = 13
TOK_SO = 14
TOK_ANS = 15
_FILLER_BASE = 16
_N_FILLERS = 8
_STEP_BASE = _FILLER_BASE + _N_FILLERS
MAX_STEPS = 8  # one step-marker symbol per step
TASK_N_CONTENT = _STEP_BASE + MAX_STEPS + 1  # +1 for the delimiter slot


def step_marker(i: int) -> int:
    """Content symbol tagging step i (1-based) in question and thought."""
    if not 1 <= i <= MAX_STEPS:
        raise ValueError(f"step index {i} outside 1..{MAX_STEPS}")
    return _STEP_BASE + i - 1

# 18 filler tokens per thought: verbosity the model learns to reproduce but
# which carries no information needed downstream.
_FILLER_PATTERN = [_FILLER_BASE + (i % _N_FILLERS) for i in range(18)]

MODULUS = 10


def task_vocab(cache_size: int) -> Vocab:
    """Vocabulary sized for the arithmetic task."""
    return make_vocab(TASK_N_CONTENT, cache_size)


@dataclasses.dataclass(frozen=True)
class RawSample:
    question: list[int]
    answer_chain: list[int]
    truth: int
    seed: int
    n_steps: int


def gen_task(
    seed: int,
    n_steps: int,
    value_range: tuple[int, int] = (0, 9),
    operand_range: tuple[int, int] = (1, 3),
) -> RawSample:
    """Generate one chained-arithmetic sample, deterministic per seed.

    Step i computes v_i = (v_{i-1} op_i a_i) mod 10. The question encodes
    the whole chain with a step-marker symbol in front of each (op, operand)
    pair; thought i repeats its marker, verbalizes the step, and ends with
    the delimiter; the final segment is [ANS, v_n, eos].
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if n_steps > MAX_STEPS:
        raise ValueError(f"n_steps must be <= {MAX_STEPS}")
    lo, hi = value_range
    if lo < 0 or hi > 9 or lo > hi:
        raise ValueError(f"value_range must lie within [0, 9], got {value_range}")
    alo, ahi = operand_range
    if alo < 0 or ahi > 9 or alo > ahi:
        raise ValueError(f"operand_range must lie within [0, 9], got {operand_range}")
    rng = np.random.default_rng(seed)
    vocab = task_vocab(1)  # content layout is independent of cache size
    delim = vocab.delimiter

    v = int(rng.integers(lo, hi + 1))
    question = [v]
    chain: list[int] = []
    for i in range(1, n_steps + 1):
        op = TOK_PLUS if rng.integers(0, 2) == 0 else TOK_MINUS
        a = int(rng.integers(alo, ahi + 1))
        nxt = (v + a) % MODULUS if op == TOK_PLUS else (v - a) % MODULUS
        question.extend([step_marker(i), op, a])
        # core: "step_i: v op a = r SO r", then fixed filler, then the delimiter
        chain.extend([step_marker(i), v, op, a, TOK_EQUALS, nxt, TOK_SO, nxt])
        chain.extend(_FILLER_PATTERN)
        chain.append(delim)
        v = nxt
    question.append(TOK_QMARK)
    chain.extend([TOK_ANS, v, vocab.eos])
    return RawSample(
        question=question, answer_chain=chain, truth=v, seed=seed, n_steps=n_steps
    )


def seg_thought_level(y: list[int], delimiter: int) -> list[list[int]]:
    """Split y at delimiters, keeping each delimiter inside its segment."""
    if not y:
        raise ValueError("cannot segment an empty sequence")
    segments: list[list[int]] = []
    cur: list[int] = []
    for tok in y:
        cur.append(tok)
        if tok == delimiter:
            segments.append(cur)
            cur = []
    if cur:
        segments.append(cur)
    return segments


def seg_token_level(y: list[int], chunk_len: int) -> list[list[int]]:
    """Split y into fixed-size chunks; the last chunk may be short."""
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    if not y:
        raise ValueError("cannot segment an empty sequence")
    return [y[i : i + chunk_len] for i in range(0, len(y), chunk_len)]


@dataclasses.dataclass
class SequenceLayout:
    """A token sequence with per-position roles and absolute positions."""

    tokens: np.ndarray  # (n,) int64
    roles: np.ndarray  # (n,) uint8, ROLE_* codes
    thought: np.ndarray  # (n,) int32, 0 for question, i>=1 otherwise
    positions: np.ndarray  # (n,) int64, 0..n-1
    k: int  # number of thought segments
    cache_size: int

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self) -> None:
        n = len(self.tokens)
        if not (len(self.roles) == len(self.thought) == len(self.positions) == n):
            raise ValueError("layout arrays disagree in length")
        if not np.array_equal(self.positions, np.arange(n)):
            raise ValueError("positions must be 0..n-1")
        # Role blocks must appear in order Q, T1, C1, O1, T2, ..., Tk with no
        # specials after the final thought.
        order = [(ROLE_QUESTION, 0)]
        for t in range(1, self.k + 1):
            order.append((ROLE_THOUGHT, t))
            if t < self.k:
                order.append((ROLE_CACHE, t))
                order.append((ROLE_OUTPUT, t))
        block = 0
        counts = {key: 0 for key in order}
        for r, t in zip(self.roles, self.thought):
            key = (int(r), int(t))
            while block < len(order) and key != order[block]:
                block += 1
            if block >= len(order):
                raise ValueError(f"unexpected role block {key}")
            counts[key] += 1
        for t in range(1, self.k):
            if counts[(ROLE_CACHE, t)] != self.cache_size:
                raise ValueError(f"cache block {t} has wrong size")
            if counts[(ROLE_OUTPUT, t)] != 1:
                raise ValueError(f"output block {t} must be a single position")
            if counts[(ROLE_THOUGHT, t)] == 0:
                raise ValueError(f"thought block {t} is empty")


def build_layout(
    x: list[int], segments: list[list[int]], vocab: Vocab
) -> SequenceLayout:
    """Interleave question, thoughts, cache blocks and output tokens."""
    if not segments:
        raise ValueError("segments must be non-empty")
    tokens: list[int] = list(x)
    roles: list[int] = [ROLE_QUESTION] * len(x)
    thought: list[int] = [0] * len(x)
    k = len(segments)
    for i, seg in enumerate(segments, start=1):
        tokens.extend(seg)
        roles.extend([ROLE_THOUGHT] * len(seg))
        thought.extend([i] * len(seg))
        if i < k:
            tokens.extend(vocab.cache_tokens)
            roles.extend([ROLE_CACHE] * vocab.cache_size)
            thought.extend([i] * vocab.cache_size)
            tokens.append(vocab.output_token)
            roles.append(ROLE_OUTPUT)
            thought.append(i)
    n = len(tokens)
    return SequenceLayout(
        tokens=np.asarray(tokens, dtype=np.int64),
        roles=np.asarray(roles, dtype=np.uint8),
        thought=np.asarray(thought, dtype=np.int32),
        positions=np.arange(n, dtype=np.int64),
        k=k,
        cache_size=vocab.cache_size,
    )


def build_loss_mask(layout: SequenceLayout) -> np.ndarray:
    """Next-token loss mask: include position t iff the target at t+1 is
    thought content (delimiters and eos included; question/cache/output
    targets are excluded)."""
    n = len(layout)
    include = np.zeros(n, dtype=bool)
    if n > 1:
        include[:-1] = layout.roles[1:] == ROLE_THOUGHT
    return include


def write_corpus(path, samples: list[RawSample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "question": s.question,
                        "chain": s.answer_chain,
                        "truth": s.truth,
                        "seed": s.seed,
                        "n_steps": s.n_steps,
                    }
                )
                + "\n"
            )


def read_corpus(path) -> list[RawSample]:
    samples = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            samples.append(
                RawSample(
                    question=list(rec["question"]),
                    answer_chain=list(rec["chain"]),
                    truth=int(rec["truth"]),
                    seed=int(rec["seed"]),
                    n_steps=int(rec["n_steps"]),
                )
            )
    return samples
