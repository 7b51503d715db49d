"""Generation policies, eviction mechanics, traces, and grading."""
import numpy as np
import pytest

from gistkv.corpus import (
    ROLE_CACHE,
    ROLE_OUTPUT,
    ROLE_THOUGHT,
    task_vocab,
)
from gistkv.engine import (
    EVENT_BUDGET,
    EVENT_EOS,
    CompressPolicy,
    HeavyHitterPolicy,
    KVCacheState,
    VanillaPolicy,
    generate,
    grade,
    heavy_hitter_keep,
    simulate_trace,
)
from gistkv.model import LayerKV, ModelConfig, init_params


def tiny_setup(cache_size=1, seed=0, d_model=16):
    tv = task_vocab(cache_size)
    cfg = ModelConfig(
        n_layers=2,
        d_model=d_model,
        n_heads=2,
        d_ff=32,
        vocab_size=tv.size,
        max_positions=512,
        dtype="float64",
    )
    return tv, cfg, init_params(cfg, seed)


class TestPolicies:
    def test_compress_policy_validation(self):
        with pytest.raises(ValueError):
            CompressPolicy(cache_size=0)
        with pytest.raises(ValueError):
            CompressPolicy(cache_size=1, trigger="every_n", chunk_len=0)
        with pytest.raises(ValueError):
            CompressPolicy(cache_size=1, trigger="sometimes")

    def test_heavy_hitter_validation(self):
        with pytest.raises(ValueError):
            HeavyHitterPolicy(budget=8, local_size=8)
        with pytest.raises(ValueError):
            HeavyHitterPolicy(budget=8, local_size=0)


class TestVanillaGeneration:
    def test_trace_counts_and_positions(self):
        tv, cfg, params = tiny_setup()
        out, trace = generate(params, cfg, tv, [1, 2, 3], VanillaPolicy(), max_new=5)
        assert len(out) == 5
        assert trace.stop_event == EVENT_BUDGET
        assert list(trace.visible_keys) == [4, 5, 6, 7, 8]
        assert list(trace.positions) == [3, 4, 5, 6, 7]
        assert np.all(trace.evicted_after == 0)

    def test_max_new_validation(self):
        tv, cfg, params = tiny_setup()
        with pytest.raises(ValueError):
            generate(params, cfg, tv, [1], VanillaPolicy(), max_new=0)


class TestCompressGeneration:
    def test_eviction_bookkeeping(self):
        tv, cfg, params = tiny_setup(cache_size=2)
        params["unembed"][:, tv.eos] -= 100.0  # keep the run from stopping early
        policy = CompressPolicy(cache_size=2, trigger="every_n", chunk_len=4)
        out, trace = generate(params, cfg, tv, [1, 2, 3], policy, max_new=12)
        cache_rows = trace.roles == ROLE_CACHE
        out_rows = trace.roles == ROLE_OUTPUT
        assert np.any(cache_rows) and np.any(out_rows)
        # each compression evicts exactly the 4-token thought
        evict_counts = trace.evicted_after[trace.evicted_after > 0]
        assert np.all(evict_counts == 4)
        # live size at each output-token forward: prompt + i*(|C|+1) + |C|
        for i, idx in enumerate(np.nonzero(out_rows)[0], start=1):
            assert trace.live_before[idx] == 3 + (i - 1) * 3 + 2

    def test_positions_strictly_increase_across_evictions(self):
        tv, cfg, params = tiny_setup(cache_size=1)
        params["unembed"][:, tv.eos] -= 100.0
        policy = CompressPolicy(cache_size=1, trigger="every_n", chunk_len=3)
        _, trace = generate(params, cfg, tv, [1, 2], policy, max_new=10)
        assert np.all(np.diff(trace.positions) == 1)

    def test_trace_visible_equals_live_plus_one(self):
        # under the compression mask every live entry stays visible
        tv, cfg, params = tiny_setup(cache_size=1)
        params["unembed"][:, tv.eos] -= 100.0
        policy = CompressPolicy(cache_size=1, trigger="every_n", chunk_len=3)
        _, trace = generate(params, cfg, tv, [1, 2], policy, max_new=10)
        assert np.all(trace.visible_keys == trace.live_before + 1)

    def test_eos_stops_without_compressing(self):
        tv, cfg, params = tiny_setup()
        # bias the unembedding so eos is emitted immediately
        params["unembed"][:, tv.eos] += 100.0
        policy = CompressPolicy(cache_size=1, trigger="every_n", chunk_len=2)
        out, trace = generate(params, cfg, tv, [1, 2], policy, max_new=10)
        assert out[-1] == tv.eos
        assert trace.stop_event == EVENT_EOS
        assert not np.any(trace.roles == ROLE_CACHE)


class TestHeavyHitter:
    def test_budget_and_local_window(self):
        tv, cfg, params = tiny_setup()
        policy = HeavyHitterPolicy(budget=10, local_size=4)
        _, trace = generate(params, cfg, tv, [1, 2, 3, 4], policy, max_new=30)
        assert np.all(trace.live_before + 1 <= 10)
        assert np.sum(trace.evicted_after) > 0

    def test_keep_mask_protects_local_window(self):
        scores = np.array([5.0, 0.1, 0.2, 9.0, 0.0, 0.0])
        keep = heavy_hitter_keep(scores, local_size=2, n_evict=2)
        assert list(keep) == [True, False, False, True, True, True]

    def test_keep_mask_orders_by_score(self):
        scores = np.array([3.0, 1.0, 2.0, 0.5])
        keep = heavy_hitter_keep(scores, local_size=1, n_evict=1)
        assert list(keep) == [True, False, True, True]


class TestKVCacheState:
    def test_evict_applies_to_every_layer(self):
        _, cfg, params = tiny_setup()
        state = KVCacheState(cfg)
        h, dh = cfg.n_heads, cfg.d_head
        kv = [
            LayerKV(k=np.ones((h, 4, dh)), v=np.ones((h, 4, dh)))
            for _ in range(cfg.n_layers)
        ]
        state.append(kv, [ROLE_THOUGHT] * 4, [1] * 4, np.arange(4))
        removed = state.evict(np.array([True, False, True, False]))
        assert removed == 2
        assert state.live == 2
        for cache in state.caches:
            assert cache.k.shape[1] == 2 and cache.v.shape[1] == 2


class TestGrade:
    def test_exact_match(self):
        tv = task_vocab(1)
        assert grade([1, 2, tv.delimiter, 15, 7, tv.eos], 7, tv)

    def test_missing_span(self):
        tv = task_vocab(1)
        assert not grade([1, 2, 3], 7, tv)

    def test_no_digit_in_span(self):
        tv = task_vocab(1)
        assert not grade([1, tv.delimiter, 15, tv.eos], 7, tv)

    def test_extra_specials_normalized_away(self):
        tv = task_vocab(1)
        assert grade([tv.delimiter, 15, 16, 7, tv.eos], 7, tv)


class TestSimulateTrace:
    def test_vanilla_series(self):
        trace = simulate_trace(VanillaPolicy(), 3, 5)
        assert list(trace.visible_keys) == [4, 5, 6, 7, 8]

    def test_h2o_saturates(self):
        trace = simulate_trace(HeavyHitterPolicy(budget=8, local_size=4), 2, 10)
        assert list(trace.visible_keys) == [3, 4, 5, 6, 7, 8, 8, 8, 8, 8]

    def test_compress_momentary_peak_example(self):
        # 10-token prompt, one 20-token thought, |C|=2: settled live 13,
        # momentary peak 32 while the cache block coexists with the thought
        policy = CompressPolicy(cache_size=2, trigger="every_n", chunk_len=20)
        trace = simulate_trace(policy, 10, 21)
        assert int(np.max(trace.live_before + 1)) == 32
        out_idx = np.nonzero(trace.roles == ROLE_OUTPUT)[0][0]
        assert trace.live_before[out_idx] == 12  # 13 once [o] lands

    def test_delimiter_trigger_rejected(self):
        with pytest.raises(ValueError):
            simulate_trace(CompressPolicy(cache_size=1, trigger="delimiter"), 3, 5)

    def test_final_partial_segment_not_compressed(self):
        policy = CompressPolicy(cache_size=1, trigger="every_n", chunk_len=4)
        trace = simulate_trace(policy, 5, 8)  # exactly two chunks
        # the second chunk's trigger would fire on the final token; it must not
        assert int(np.sum(trace.roles == ROLE_CACHE)) == 1
