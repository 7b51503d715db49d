"""Acceptance gate: one test per criterion, one printed pass/fail line each.

Run with `pytest -v tests/test_acceptance.py -s` to see the per-criterion
lines. The slow learning criterion (7) trains two small models end to end;
everything else is fast.
"""
import time

import numpy as np
import pytest

from gistkv.bench import cmd_longgen, compress_peak_bound, run_policy
from gistkv.corpus import (
    ROLE_OUTPUT,
    build_layout,
    gen_task,
    make_vocab,
    seg_thought_level,
    task_vocab,
)
from gistkv.engine import (
    CompressPolicy,
    HeavyHitterPolicy,
    VanillaPolicy,
    generate,
    grade,
    simulate_trace,
)
from gistkv.masks import MaskMode, _pair_allowed, build_mask, verify_mask
from gistkv.metrics import (
    compression_ratio,
    dep_discrete,
    dep_h2o_closed,
    dep_vanilla_closed,
)
from gistkv.model import ModelConfig, forward, init_params, loss_and_grads
from gistkv.training import TrainConfig, train


def report(criterion, ok, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


def test_criterion_1_dep_closed_form_laws():
    rng = np.random.default_rng(11)
    t0 = time.monotonic()
    for _ in range(200):
        lp = int(rng.integers(1, 513))
        lo = int(rng.integers(1, 4097))
        trace = simulate_trace(VanillaPolicy(), lp, lo)
        assert dep_discrete(trace) - dep_vanilla_closed(lp, lo) == lo / 2
    for _ in range(200):
        lp = int(rng.integers(1, 513))
        lc = lp + int(rng.integers(1, 256))
        lo = (lc - lp) + int(rng.integers(0, 4097))  # saturated regime
        policy = HeavyHitterPolicy(budget=lc, local_size=max(1, lc // 2))
        trace = simulate_trace(policy, lp, lo)
        assert dep_discrete(trace) - dep_h2o_closed(lp, lo, lc) == (lc - lp) / 2
    elapsed = time.monotonic() - t0
    report(1, elapsed < 5.0, f"400 exact off-by-half checks in {elapsed:.2f}s")


def test_criterion_2_paper_ratio_arithmetic():
    r1 = compression_ratio(16.6e6, 3.7e6)
    r2 = compression_ratio(16.6e6, 4.4e6)
    ok = 4.45 <= r1 <= 4.55 and 3.72 <= r2 <= 3.82
    report(2, ok, f"ratios {r1:.3f} and {r2:.3f}")


def _reference_generate(params, cfg, vocab, prompt, policy, max_new):
    """Independent oracle: full-context greedy decoding over a growing layout
    under the training-time compression mask. Mirrors the visibility rules
    directly; shares no cache machinery with the engine."""
    from gistkv.corpus import ROLE_CACHE, ROLE_QUESTION, ROLE_THOUGHT

    tokens = list(prompt)
    roles = [ROLE_QUESTION] * len(prompt)
    thoughts = [0] * len(prompt)

    def last_logits():
        n = len(tokens)
        causal = np.tril(np.ones((n, n), dtype=bool))
        allowed = _pair_allowed(
            policy.mask_mode,
            np.asarray(roles),
            np.asarray(thoughts),
            np.asarray(roles),
            np.asarray(thoughts),
            False,
        )
        allow = causal & allowed
        np.fill_diagonal(allow, True)
        return forward(params, cfg, np.asarray(tokens), np.arange(n), allow)[-1]

    out, logits_log = [], []
    ti, since, budget = 1, 0, max_new
    while budget > 0:
        lg = last_logits()
        logits_log.append(lg)
        tok = int(np.argmax(lg))
        tokens.append(tok)
        roles.append(ROLE_THOUGHT)
        thoughts.append(ti)
        out.append(tok)
        budget -= 1
        since += 1
        if tok == vocab.eos:
            break
        fire = (policy.trigger == "delimiter" and tok == vocab.delimiter) or (
            policy.trigger == "every_n" and since >= policy.chunk_len
        )
        if fire:
            for ctok in vocab.cache_tokens:
                tokens.append(ctok)
                roles.append(ROLE_CACHE)
                thoughts.append(ti)
                out.append(ctok)
            tokens.append(vocab.output_token)
            roles.append(ROLE_OUTPUT)
            thoughts.append(ti)
            out.append(vocab.output_token)
            ti += 1
            since = 0
    return out, logits_log


def test_criterion_3_mask_equivalence_oracle():
    rng = np.random.default_rng(23)
    t0 = time.monotonic()
    worst_gap = 0.0
    for trial in range(25):
        cache_size = int(rng.integers(1, 10))
        vocab = make_vocab(16, cache_size)
        cfg = ModelConfig(
            n_layers=int(rng.integers(1, 3)),
            d_model=int(rng.choice([8, 16, 32])),
            n_heads=int(rng.choice([1, 2])),
            d_ff=int(rng.integers(8, 48)),
            vocab_size=vocab.size,
            max_positions=256,
            dtype="float64",
        )
        params = init_params(cfg, int(rng.integers(0, 1 << 30)))
        prompt = [int(t) for t in rng.integers(0, 10, size=rng.integers(1, 7))]
        chunk = int(rng.integers(2, 6))
        max_new = int(chunk * rng.integers(2, 5) + rng.integers(1, chunk))
        policy = CompressPolicy(
            cache_size=cache_size, trigger="every_n", chunk_len=chunk
        )
        sink = []
        out_engine, _ = generate(
            params, cfg, vocab, prompt, policy, max_new, logit_sink=sink
        )
        out_ref, logits_ref = _reference_generate(
            params, cfg, vocab, prompt, policy, max_new
        )
        assert out_engine == out_ref, f"trial {trial}: token mismatch"
        assert len(sink) == len(logits_ref)
        gap = max(
            float(np.max(np.abs(a - b))) for a, b in zip(sink, logits_ref)
        )
        worst_gap = max(worst_gap, gap)
        assert gap <= 1e-9
    elapsed = time.monotonic() - t0
    report(
        3,
        elapsed < 60.0,
        f"25 models token-identical, worst logit gap {worst_gap:.2e}, {elapsed:.1f}s",
    )


def test_criterion_4_mask_structure():
    rng = np.random.default_rng(7)
    from gistkv.corpus import ROLE_CACHE, ROLE_QUESTION, ROLE_THOUGHT

    violations = 0
    for _ in range(500):
        cache_size = int(rng.integers(1, 10))
        vocab = make_vocab(16, cache_size)
        qlen = int(rng.integers(1, 7))
        segs = [
            [int(x) for x in rng.integers(0, 10, size=rng.integers(1, 11))]
            for _ in range(rng.integers(1, 7))
        ]
        lay = build_layout(list(range(qlen)), segs, vocab)
        for mode in MaskMode:
            mask = build_mask(lay, mode)
            violations += len(verify_mask(lay, mode, mask))
        # pairwise-exhaustive properties under the compression mask
        allow = build_mask(lay, MaskMode.THOUGHT_CACHE).allow
        for q in range(len(lay)):
            qr, qt = lay.roles[q], lay.thought[q]
            for k in range(q + 1):
                kr, kt = lay.roles[k], lay.thought[k]
                if kr == ROLE_THOUGHT and (
                    kt < qt or (kt == qt and qr == ROLE_OUTPUT)
                ):
                    assert not allow[q, k]  # thought isolation
                if qr == ROLE_CACHE:
                    expect = (
                        kr == ROLE_QUESTION
                        or (kr in (ROLE_CACHE, ROLE_OUTPUT) and kt < qt)
                        or (kr in (ROLE_THOUGHT, ROLE_CACHE) and kt == qt)
                    )
                    assert bool(allow[q, k]) == expect  # compression window
    report(4, violations == 0, f"500 layouts x 4 modes, {violations} violations")


def test_criterion_5_gradient_soundness():
    cfg = ModelConfig(
        n_layers=2,
        d_model=16,
        n_heads=2,
        d_ff=32,
        vocab_size=20,
        max_positions=64,
        dtype="float64",
    )
    params = init_params(cfg, 1)
    toks = np.array([1, 7, 3, 12, 5, 9, 2, 4])
    pos = np.arange(8)
    allow = np.tril(np.ones((8, 8), dtype=bool))
    mask = np.array([True] * 7 + [False])
    _, grads = loss_and_grads(params, cfg, toks, pos, allow, mask)
    rng = np.random.default_rng(0)
    eps = 1e-5
    worst = 0.0
    for _ in range(20):
        d = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        analytic = sum(float(np.sum(grads[k] * d[k])) for k in params)
        lp, _ = loss_and_grads(
            {k: params[k] + eps * d[k] for k in params}, cfg, toks, pos, allow, mask
        )
        lm, _ = loss_and_grads(
            {k: params[k] - eps * d[k] for k in params}, cfg, toks, pos, allow, mask
        )
        numeric = (lp - lm) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-12))
    report(5, worst < 1e-4, f"20 directions, max relative error {worst:.2e}")


def test_criterion_6_eviction_completeness_and_budget():
    rng = np.random.default_rng(31)
    checked_compress = checked_h2o = 0
    for trial in range(100):
        cache_size = int(rng.integers(1, 4))
        vocab = make_vocab(16, cache_size)
        cfg = ModelConfig(
            n_layers=1,
            d_model=16,
            n_heads=2,
            d_ff=32,
            vocab_size=vocab.size,
            max_positions=512,
            dtype="float32",
        )
        params = init_params(cfg, trial)
        params["unembed"][:, vocab.eos] -= 50.0  # force long generations
        prompt = [int(t) for t in rng.integers(0, 10, size=rng.integers(2, 6))]
        if trial % 2 == 0:
            chunk = int(rng.integers(2, 6))
            policy = CompressPolicy(
                cache_size=cache_size, trigger="every_n", chunk_len=chunk
            )
            _, trace = generate(params, cfg, vocab, prompt, policy, max_new=25)
            out_rows = np.nonzero(trace.roles == ROLE_OUTPUT)[0]
            for i, idx in enumerate(out_rows, start=1):
                # live at [o] = prompt + (i-1) closed blocks + this cache block:
                # any surviving thought entry would inflate the count
                assert trace.live_before[idx] == len(prompt) + (i - 1) * (
                    cache_size + 1
                ) + cache_size
            evictions = trace.evicted_after[trace.evicted_after > 0]
            assert np.all(evictions == chunk)
            checked_compress += len(out_rows)
        else:
            budget = int(rng.integers(6, 14))
            policy = HeavyHitterPolicy(budget=budget, local_size=budget // 2)
            _, trace = generate(params, cfg, vocab, prompt, policy, max_new=25)
            assert np.all(trace.live_before + 1 <= budget)
            checked_h2o += 1
    report(
        6,
        checked_compress > 50 and checked_h2o == 50,
        f"{checked_compress} compression events clean, 50 budgeted runs within budget",
    )


@pytest.mark.slow
def test_criterion_7_desk_scale_learning():
    t0 = time.monotonic()
    tv = task_vocab(1)
    rng = np.random.default_rng(0)
    samples = [gen_task(1000 + i, int(rng.integers(2, 6))) for i in range(2000)]
    hold = [gen_task(999_000 + i, int(rng.integers(2, 6))) for i in range(60)]
    # d_model=32 generalizes the step arithmetic where wider models memorize
    # the training questions; two layers are required so information can flow
    # thought -> cache token -> later thought (two attention hops)
    mcfg = ModelConfig(
        n_layers=2,
        d_model=32,
        n_heads=4,
        d_ff=64,
        vocab_size=tv.size,
        max_positions=256,
        dtype="float32",
    )
    base = dict(
        batch_size=16,
        learn_rate=2e-3,
        warmup_ratio=0.05,
        max_length=256,
        seed=0,
        cache_size=1,
    )
    tcfg_v = TrainConfig(epochs=40, mask_mode=MaskMode.VANILLA, **base)
    params_v, _ = train(samples, tv, mcfg, tcfg_v)
    tcfg_c = TrainConfig(epochs=48, mask_mode=MaskMode.THOUGHT_CACHE, **base)
    params_c, _ = train(samples, tv, mcfg, tcfg_c)

    res_v = run_policy(params_v, mcfg, tv, VanillaPolicy(), hold, 200, "vanilla")
    policy_c = CompressPolicy(cache_size=1, trigger="delimiter")
    res_c = run_policy(params_c, mcfg, tv, policy_c, hold, 200, "compressed")
    acc_v, acc_c = res_v.accuracy, res_c.accuracy
    dep_v = sum(r["dep"] for r in res_v.rows)
    dep_c = sum(r["dep"] for r in res_c.rows)
    elapsed = time.monotonic() - t0
    n_params = sum(v.size for v in params_v.values())
    ok = (
        n_params <= 1_000_000
        and acc_v >= 0.90
        and acc_c >= acc_v - 0.10
        and dep_c <= 0.5 * dep_v
        and elapsed < 1800
    )
    report(
        7,
        ok,
        f"vanilla acc {acc_v:.2f}, compressed acc {acc_c:.2f}, "
        f"dep ratio {dep_c / dep_v:.3f}, {n_params} params, {elapsed:.0f}s",
    )


def test_criterion_8_long_generation_mechanics():
    rows = cmd_longgen(measure_time=False)
    by_len = {r["n_output"]: r for r in rows}
    exact = all(r["peak_compressed"] == r["peak_bound"] for r in rows)
    r1k = by_len[1024]["peak_reduction"]
    r32k = by_len[32768]["peak_reduction"]
    ok = exact and r1k >= 0.70 and r32k >= 0.80
    report(8, ok, f"reduction {r1k:.1%} at 1K, {r32k:.1%} at 32K, bounds exact={exact}")


@pytest.mark.slow
def test_criterion_9_ablation_harness():
    rng = np.random.default_rng(5)
    samples = [gen_task(50_000 + i, int(rng.integers(2, 4))) for i in range(300)]
    hold = [gen_task(60_000 + i, int(rng.integers(2, 4))) for i in range(20)]
    results = {}
    for mode, cache_size in (
        [(MaskMode.THOUGHT_CACHE, c) for c in (1, 3, 5, 9)]
        + [(MaskMode.ANCHOR, 1), (MaskMode.DECOUPLED_ANCHOR, 1)]
    ):
        tv = task_vocab(cache_size)
        mcfg = ModelConfig(
            n_layers=2,
            d_model=32,
            n_heads=4,
            d_ff=64,
            vocab_size=tv.size,
            max_positions=300,
            dtype="float32",
        )
        tcfg = TrainConfig(
            epochs=4,
            batch_size=16,
            learn_rate=1.5e-3,
            warmup_ratio=0.05,
            max_length=300,
            seed=0,
            mask_mode=mode,
            cache_size=cache_size,
        )
        params, _ = train(samples, tv, mcfg, tcfg)
        policy = CompressPolicy(
            cache_size=cache_size, trigger="delimiter", mask_mode=mode
        )
        name = f"{mode.value}_c{cache_size}"
        results[name] = run_policy(params, mcfg, tv, policy, hold, 150, name)
    complete = all(
        len(res.rows) == 20
        and all(
            {"correct", "dep", "peak", "generated", "time_s", "compressions"}
            <= set(row)
            for row in res.rows
        )
        for res in results.values()
    )
    acc_tc = results["thought_cache_c1"].accuracy
    acc_da = results["decoupled_anchor_c1"].accuracy
    ordering = acc_tc >= acc_da
    detail = (
        f"6 cells complete={complete}; thought_cache acc {acc_tc:.2f} vs "
        f"decoupled_anchor acc {acc_da:.2f} "
        + ("(expected ordering holds)" if ordering else "(ordering violated - logged as finding, not a failure)")
    )
    report(9, complete, detail)
