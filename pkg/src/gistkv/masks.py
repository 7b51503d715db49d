"""Attention visibility matrices for compression-annotated layouts.

Four modes:

* VANILLA: plain causal lower triangle.
* THOUGHT_CACHE: the decoupled compression mask. Cache rows see the
  question, all earlier compressed blocks, and the current thought; output
  rows see the question and compressed blocks but never their own thought;
  later thoughts never see earlier thoughts.
* ANCHOR: coupled anchor-style mask. Compression rows see only the current
  thought plus earlier anchor positions (no question access); generation
  rows see anchors only. The first thought still sees the question, since
  nothing has been compressed yet.
* DECOUPLED_ANCHOR: keeps the separate cache/output tokens but applies the
  anchor visibility rule, i.e. THOUGHT_CACHE minus question access for
  cache and output rows.

All modes are causal and every position sees itself.
"""
from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .corpus import (
    ROLE_CACHE,
    ROLE_OUTPUT,
    ROLE_QUESTION,
    ROLE_THOUGHT,
    SequenceLayout,
)


class MaskMode(enum.Enum):
    VANILLA = "vanilla"
    THOUGHT_CACHE = "thought_cache"
    ANCHOR = "anchor"
    DECOUPLED_ANCHOR = "decoupled_anchor"


@dataclasses.dataclass
class AttentionMask:
    allow: np.ndarray  # (n, n) bool, allow[q, k] = query q may attend key k

    @property
    def n(self) -> int:
        return self.allow.shape[0]


def _pair_allowed(
    mode: MaskMode,
    q_role: np.ndarray,
    q_thought: np.ndarray,
    k_role: np.ndarray,
    k_thought: np.ndarray,
    anchor_sees_question: bool,
) -> np.ndarray:
    """Role-level visibility predicate, broadcast over (queries, keys).

    Causality and intra-block ordering are applied separately; this only
    answers "may role/thought q ever see role/thought k".
    """
    qr = q_role[:, None]
    qt = q_thought[:, None]
    kr = k_role[None, :]
    kt = k_thought[None, :]

    if mode is MaskMode.VANILLA:
        return np.ones((len(q_role), len(k_role)), dtype=bool)

    k_is_q = kr == ROLE_QUESTION
    k_is_t = kr == ROLE_THOUGHT
    k_is_c = kr == ROLE_CACHE
    k_is_o = kr == ROLE_OUTPUT
    same = kt == qt
    earlier = kt < qt
    self_pair = same & (kr == qr)

    if mode is MaskMode.THOUGHT_CACHE:
        see_question = np.ones_like(k_is_q)
    elif mode is MaskMode.DECOUPLED_ANCHOR:
        # Cache/output rows lose the question; thought rows keep it.
        row_keeps_q = (qr == ROLE_QUESTION) | (qr == ROLE_THOUGHT)
        if anchor_sees_question:
            row_keeps_q = np.ones_like(row_keeps_q)
        see_question = row_keeps_q
    else:  # ANCHOR
        row_keeps_q = (qr == ROLE_QUESTION) | ((qr == ROLE_THOUGHT) & (qt == 1))
        if anchor_sees_question:
            row_keeps_q = row_keeps_q | (qr != ROLE_QUESTION)
        see_question = row_keeps_q

    if mode in (MaskMode.THOUGHT_CACHE, MaskMode.DECOUPLED_ANCHOR):
        see_thought = k_is_t & same & ((qr == ROLE_THOUGHT) | (qr == ROLE_CACHE))
        see_cache = k_is_c & (earlier | (same & ((qr == ROLE_CACHE) | (qr == ROLE_OUTPUT))))
        see_output = k_is_o & (earlier | self_pair)
    else:  # ANCHOR: earlier thoughts are reachable only through anchors
        see_thought = k_is_t & same & ((qr == ROLE_THOUGHT) | (qr == ROLE_CACHE))
        see_cache = k_is_c & (
            (earlier & (qr != ROLE_QUESTION))
            | (same & ((qr == ROLE_CACHE) | (qr == ROLE_OUTPUT)))
        )
        see_output = k_is_o & ((earlier & (qr != ROLE_QUESTION)) | self_pair)

    return (k_is_q & see_question) | see_thought | see_cache | see_output


def build_mask(
    layout: SequenceLayout,
    mode: MaskMode,
    anchor_sees_question: bool = False,
) -> AttentionMask:
    """Visibility matrix for a layout under the given mode."""
    layout.validate()
    n = len(layout)
    causal = np.tril(np.ones((n, n), dtype=bool))
    allowed = _pair_allowed(
        mode,
        layout.roles,
        layout.thought,
        layout.roles,
        layout.thought,
        anchor_sees_question,
    )
    allow = causal & allowed
    np.fill_diagonal(allow, True)
    return AttentionMask(allow=allow)


def verify_mask(
    layout: SequenceLayout,
    mode: MaskMode,
    mask: AttentionMask,
    anchor_sees_question: bool = False,
) -> list[tuple[int, int, bool, bool]]:
    """Diff a mask against the rules; each violation is (q, k, expected, found)."""
    expected = build_mask(layout, mode, anchor_sees_question).allow
    if mask.allow.shape != expected.shape:
        raise ValueError("mask shape does not match layout")
    qs, ks = np.nonzero(expected != mask.allow)
    return [
        (int(q), int(k), bool(expected[q, k]), bool(mask.allow[q, k]))
        for q, k in zip(qs, ks)
    ]


def dump_mask(mask: AttentionMask) -> str:
    """Raster of '1'/'0' rows, one row per query."""
    return "\n".join("".join("1" if b else "0" for b in row) for row in mask.allow)


def parse_mask(text: str) -> AttentionMask:
    rows = text.strip("\n").split("\n")
    width = len(rows[0])
    allow = np.zeros((len(rows), width), dtype=bool)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"ragged raster row {i}")
        for j, ch in enumerate(row):
            if ch == "1":
                allow[i, j] = True
            elif ch != "0":
                raise ValueError(f"unexpected character {ch!r} in raster")
    return AttentionMask(allow=allow)
