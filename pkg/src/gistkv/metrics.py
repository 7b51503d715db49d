"""Context-dependency and peak-memory metrics over generation traces.

Dependency (dep) counts, over every autoregressive forward after the
prompt, the number of keys that forward attended (self included). The
canonical value is this discrete self-inclusive sum; the closed forms for
plain causal decoding and budgeted eviction are the continuous trapezoid
areas under the context-length curve, and differ from the discrete sum by an
exact half-step:

    dep_discrete(vanilla) - dep_vanilla_closed(L_P, L_O) == L_O / 2
    dep_discrete(h2o)     - dep_h2o_closed(L_P, L_O, L_C) == (L_C - L_P) / 2

(the second in the saturated regime L_O >= L_C - L_P).
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .corpus import ROLE_THOUGHT
from .engine import GenerationTrace


def dep_discrete(trace: GenerationTrace) -> int:
    """Sum of visible keys over every recorded forward, self included."""
    return int(np.sum(trace.visible_keys))


def dep_iterative(trace: GenerationTrace) -> int:
    """Alias of dep_discrete for traces with eviction events; dynamic
    compression has no closed form and must be summed step by step."""
    return dep_discrete(trace)


def dep_content_only(trace: GenerationTrace) -> int:
    """Discrete sum restricted to content-token forwards (no cache/output
    specials); reported alongside the inclusive count for transparency."""
    mask = trace.roles == ROLE_THOUGHT
    return int(np.sum(trace.visible_keys[mask]))


def dep_vanilla_closed(prompt_len: float, n_output: float) -> float:
    """Trapezoid area under the plain causal context curve."""
    if prompt_len < 0 or n_output < 0:
        raise ValueError("lengths must be non-negative")
    return n_output**2 / 2.0 + prompt_len * n_output


def dep_h2o_closed(prompt_len: float, n_output: float, budget: float) -> float:
    """Trapezoid + rectangle area under the budgeted-eviction context curve.

    Valid when budget >= prompt_len. Outside the saturated regime (the cache
    never fills: n_output < budget - prompt_len) this falls back to the
    vanilla closed form.
    """
    if budget < prompt_len:
        raise ValueError("budget must be >= prompt length")
    if n_output < budget - prompt_len:
        return dep_vanilla_closed(prompt_len, n_output)
    return (
        2 * prompt_len * budget
        + 2 * n_output * budget
        - prompt_len**2
        - budget**2
    ) / 2.0


def peak(trace: GenerationTrace) -> int:
    """Maximum simultaneously-live context, momentary pre-eviction peaks
    included (each record counts its live cache plus itself)."""
    if len(trace) == 0:
        return trace.prompt_len
    return int(np.max(trace.live_before + 1))


def compression_ratio(dep_ref: float, dep: float) -> float:
    """Reference dependency divided by the accelerated method's dependency."""
    if dep <= 0:
        raise ValueError("dep must be positive")
    return dep_ref / dep


@dataclasses.dataclass
class EffReport:
    """Efficiency summary for one generation run."""

    dep: int
    dep_content: int
    peak: int
    generated: int
    time_s: float
    compression_ratio: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def efficiency_report(
    trace: GenerationTrace, time_s: float = 0.0, dep_ref: float | None = None
) -> EffReport:
    d = dep_discrete(trace)
    ratio = compression_ratio(dep_ref, d) if dep_ref is not None and d > 0 else None
    return EffReport(
        dep=d,
        dep_content=dep_content_only(trace),
        peak=peak(trace),
        generated=trace.generated,
        time_s=time_s,
        compression_ratio=ratio,
    )
