import numpy as np
import numpy.testing as npt
import pytest

import memaug.autodiff as ad
from memaug import (EncoderConfig, EncoderModel, FusionSpec, Tensor, Vocab,
                    backward)
from memaug.encoder import LayerParams, init_encoder_params, self_attention
from memaug.fusion import (build_memory_chunked, build_memory_gated,
                           build_memory_single, cross_attention_fuse,
                           gate_attention_fuse, init_fusion_params,
                           memory_attention, plan_fusion)
from memaug.encoder import MemoryCache
from memaug.errors import ConfigError, ShapeError
from memaug.optim import ParamStore

from oracles import ref_gated_memory, ref_multi_head_attention


def layer_fixture(d=4, seed=0):
    config = EncoderConfig(1, d, 1, d * 2, 8, 8)
    store = init_encoder_params(config, np.random.default_rng(seed))
    return LayerParams(store, "layer1."), config


def cache_of(arrays):
    return MemoryCache([Tensor(a) for a in arrays], "test", 1,
                       arrays[0].shape[0])


class TestMemoryAttention:
    def test_empty_memory_equals_self_attention_bitwise(self):
        layer, config = layer_fixture(d=4, seed=1)
        rng = np.random.default_rng(2)
        h = Tensor(rng.normal(size=(3, 4)))
        plain = self_attention(h, layer, None, 1)
        fused = memory_attention(h, Tensor(np.zeros((0, 4))), layer, 1,
                                 mem_mask=np.ones((1, 0), dtype=bool))
        assert plain.data.tobytes() == fused.data.tobytes()

    def test_duplication_identity(self):
        layer, _ = layer_fixture(d=4, seed=3)
        rng = np.random.default_rng(4)
        h = Tensor(rng.normal(size=(3, 4)))
        plain = self_attention(h, layer, None, 1)
        fused = memory_attention(h, h, layer, 1)
        npt.assert_allclose(fused.data, plain.data, atol=1e-9)

    def test_hand_case_vs_loop_oracle(self):
        # n=2, d=2, one head: the oracle builds the 2x4 score matrix itself
        config = EncoderConfig(1, 2, 1, 4, 8, 8)
        store = init_encoder_params(config, np.random.default_rng(5))
        layer = LayerParams(store, "layer1.")
        layer.wq.data[:] = [[1.0, 0.5], [-0.25, 1.0]]
        layer.wk.data[:] = [[0.75, -0.5], [0.5, 1.25]]
        layer.wv.data[:] = [[1.0, 0.0], [0.0, -1.0]]
        layer.wo.data[:] = [[0.5, 1.0], [1.0, -0.5]]
        h = np.array([[0.2, -0.4], [1.0, 0.6]])
        m = np.array([[-0.8, 0.3], [0.1, 0.9]])
        got = memory_attention(Tensor(h), Tensor(m), layer, 1)
        want = ref_multi_head_attention(h, layer.wq.data, layer.wk.data,
                                        layer.wv.data, layer.wo.data, 1,
                                        memory=m)
        npt.assert_allclose(got.data, want, atol=1e-12)

    def test_random_cases_vs_loop_oracle(self):
        rng = np.random.default_rng(6)
        for heads in (1, 2):
            layer, config = layer_fixture(d=4, seed=rng.integers(1000))
            h = rng.normal(size=(5, 4))
            m = rng.normal(size=(5, 4))
            got = memory_attention(Tensor(h), Tensor(m), layer, heads)
            want = ref_multi_head_attention(h, layer.wq.data, layer.wk.data,
                                            layer.wv.data, layer.wo.data,
                                            heads, memory=m)
            npt.assert_allclose(got.data, want, atol=1e-12)

    def test_rows_are_stochastic_over_all_columns(self):
        layer, _ = layer_fixture(d=4, seed=8)
        rng = np.random.default_rng(9)
        h = Tensor(rng.normal(size=(4, 4)))
        m = Tensor(rng.normal(size=(4, 4)))
        pad = np.array([True, True, True, False])
        seen = {}
        orig = ad.softmax_last

        def spy(x, mask=None):
            out = orig(x, mask)
            seen["row_sums"] = out.data.sum(axis=-1)
            seen["mask"] = mask
            return out

        ad.softmax_last = spy
        try:
            memory_attention(h, m, layer, 1, pad_mask=pad)
        finally:
            ad.softmax_last = orig
        npt.assert_allclose(seen["row_sums"], 1.0, atol=1e-9)
        assert seen["mask"].shape == (1, 4, 8)
        # pad column masked in the local and the memory segment alike
        assert not seen["mask"][0, 0, 3] and not seen["mask"][0, 0, 7]

    def test_width_mismatch(self):
        layer, _ = layer_fixture(d=4)
        with pytest.raises(ShapeError):
            memory_attention(Tensor(np.zeros((3, 4))),
                             Tensor(np.zeros((3, 6))), layer, 1)

    def test_no_gradient_into_frozen_memory_producer(self):
        layer, _ = layer_fixture(d=4, seed=10)
        h = Tensor(np.random.default_rng(11).normal(size=(3, 4)), True)
        m = Tensor(np.random.default_rng(12).normal(size=(3, 4)))  # frozen
        out = memory_attention(h, m, layer, 1)
        backward(ad.sum_all(out))
        assert m.grad is None
        assert h.grad is not None


class TestMemoryBuilders:
    def test_single_returns_last_unchanged(self):
        cache = cache_of([np.full((2, 3), float(i)) for i in range(1, 7)])
        out = build_memory_single(cache)
        assert out is cache.layers[-1]
        npt.assert_array_equal(out.data, np.full((2, 3), 6.0))

    def test_single_layer_cache(self):
        cache = cache_of([np.ones((2, 2))])
        assert build_memory_single(cache) is cache.layers[0]

    def test_single_empty_cache_rejected(self):
        with pytest.raises(ConfigError):
            build_memory_single(MemoryCache([], "x", 1, 0))

    def test_gated_zero_init_is_layer_mean(self):
        rng = np.random.default_rng(13)
        arrays = [rng.normal(size=(3, 4)) for _ in range(5)]
        cache = cache_of(arrays)
        out = build_memory_gated(cache.layers, Tensor(np.zeros((4, 1))),
                                 Tensor(np.zeros(1)))
        npt.assert_allclose(out.data, np.mean(arrays, axis=0), atol=1e-12)

    def test_gated_singleton_ignores_gate(self):
        rng = np.random.default_rng(14)
        arr = rng.normal(size=(3, 4))
        out = build_memory_gated([Tensor(arr)],
                                 Tensor(rng.normal(size=(4, 1))),
                                 Tensor(rng.normal(size=1)))
        npt.assert_allclose(out.data, arr, atol=1e-15)

    def test_gated_matches_per_token_oracle(self):
        rng = np.random.default_rng(15)
        arrays = [rng.normal(size=(2, 2)) for _ in range(3)]
        weight = rng.normal(size=(2, 1))
        bias = rng.normal(size=1)
        diag = {}
        out = build_memory_gated([Tensor(a) for a in arrays], Tensor(weight),
                                 Tensor(bias), diag=diag)
        want, alphas = ref_gated_memory(arrays, weight[:, 0], float(bias[0]))
        npt.assert_allclose(out.data, want, atol=1e-12)
        npt.assert_allclose(diag["alpha"], alphas, atol=1e-12)
        npt.assert_allclose(diag["alpha"].sum(axis=1), 1.0, atol=1e-9)

    def test_gate_gradients_match_finite_differences(self):
        rng = np.random.default_rng(16)
        arrays = [rng.normal(size=(3, 4)) for _ in range(4)]
        weight = Tensor(rng.normal(size=(4, 1)), True)
        bias = Tensor(rng.normal(size=1), True)
        out = ad.sum_all(ad.mul(build_memory_gated(
            [Tensor(a) for a in arrays], weight, bias), Tensor(np.full((3, 4), 0.7))))
        backward(out)
        from oracles import central_difference

        def f():
            w = weight.data[:, 0]
            scores = np.stack([a @ w + bias.data[0] for a in arrays], axis=1)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            alpha = e / e.sum(axis=1, keepdims=True)
            mixed = sum(alpha[:, l:l + 1] * arrays[l] for l in range(4))
            return float((mixed * 0.7).sum())

        num = central_difference(f, {"w": weight.data, "b": bias.data}, h=1e-6)
        npt.assert_allclose(weight.grad, num["w"], atol=1e-6)
        npt.assert_allclose(bias.grad, num["b"], atol=1e-6)

    def test_chunked_singleton_chunks(self):
        cache = cache_of([np.full((2, 2), 1.0), np.full((2, 2), 2.0)])
        gates = (Tensor(np.zeros((2, 1))), Tensor(np.zeros(1)))
        low, high = build_memory_chunked(cache, 1, gates, gates)
        npt.assert_array_equal(low.data, np.full((2, 2), 1.0))
        npt.assert_array_equal(high.data, np.full((2, 2), 2.0))

    def test_chunked_zero_gates_mean_per_chunk(self):
        rng = np.random.default_rng(17)
        arrays = [rng.normal(size=(2, 3)) for _ in range(6)]
        cache = cache_of(arrays)
        zero = lambda: (Tensor(np.zeros((3, 1))), Tensor(np.zeros(1)))
        low, high = build_memory_chunked(cache, 3, zero(), zero())
        npt.assert_allclose(low.data, np.mean(arrays[:3], axis=0), atol=1e-12)
        npt.assert_allclose(high.data, np.mean(arrays[3:], axis=0), atol=1e-12)

    def test_chunked_composes_two_gated_runs(self):
        rng = np.random.default_rng(18)
        arrays = [rng.normal(size=(3, 4)) for _ in range(6)]
        cache = cache_of(arrays)
        g_lo = (Tensor(rng.normal(size=(4, 1))), Tensor(rng.normal(size=1)))
        g_hi = (Tensor(rng.normal(size=(4, 1))), Tensor(rng.normal(size=1)))
        low, high = build_memory_chunked(cache, 3, g_lo, g_hi)
        ref_low = build_memory_gated(cache.layers[:3], *g_lo)
        ref_high = build_memory_gated(cache.layers[3:], *g_hi)
        npt.assert_array_equal(low.data, ref_low.data)
        npt.assert_array_equal(high.data, ref_high.data)

    def test_chunked_invalid_split(self):
        cache = cache_of([np.zeros((1, 2))] * 4)
        gates = (Tensor(np.zeros((2, 1))), Tensor(np.zeros(1)))
        with pytest.raises(ConfigError):
            build_memory_chunked(cache, 4, gates, gates)


class TestPlanFusion:
    def test_single_layer9_of_12(self):
        plan = plan_fusion(FusionSpec("single", dst=9), 12, 12)
        assert set(plan) == {9}
        cache = cache_of([np.full((1, 2), float(i)) for i in range(1, 13)])
        npt.assert_array_equal(plan[9](cache, {}).data, np.full((1, 2), 12.0))

    def test_chunk_hooks_at_6_and_12(self):
        store = ParamStore()
        spec = FusionSpec("chunk_gated", split=6, dst_low=6, dst_high=12)
        init_fusion_params(store, 2, 1, spec, np.random.default_rng(0), 12)
        plan = plan_fusion(spec, 12, 12, store)
        assert set(plan) == {6, 12}

    def test_multi_maps_layer_i_to_layer_i(self):
        plan = plan_fusion(FusionSpec("multi"), 6, 6)
        assert set(plan) == set(range(1, 7))
        cache = cache_of([np.full((1, 2), float(i)) for i in range(1, 7)])
        for i in range(1, 7):
            npt.assert_array_equal(plan[i](cache, {}).data,
                                   np.full((1, 2), float(i)))

    def test_multi_depth_mismatch(self):
        with pytest.raises(ConfigError):
            plan_fusion(FusionSpec("multi"), 6, 4)

    def test_resolved_defaults(self):
        spec = FusionSpec("chunk_gated").resolved(12, 12)
        assert (spec.split, spec.dst_low, spec.dst_high) == (6, 6, 12)
        assert FusionSpec("single").resolved(12, 12).dst == 9
        assert FusionSpec("gated").resolved(6, 6).dst == 5

    def test_invalid_dst(self):
        with pytest.raises(ConfigError):
            FusionSpec("single", dst=9).validate(6, 6)


class TestCrossAttention:
    def cross_params(self, d, seed):
        rng = np.random.default_rng(seed)
        return {w: Tensor(rng.normal(size=(d, d))) for w in
                ("wq", "wk", "wv", "wo")}

    def test_zero_value_projection_returns_residual(self):
        cross = self.cross_params(4, 19)
        cross["wv"].data[:] = 0.0
        h = Tensor(np.random.default_rng(20).normal(size=(3, 4)))
        m = Tensor(np.zeros((3, 4)))
        out = cross_attention_fuse(h, m, cross, 1)
        npt.assert_allclose(out.data, h.data, atol=1e-15)

    def test_attention_rows_sum_to_one(self):
        cross = self.cross_params(4, 21)
        h = Tensor(np.random.default_rng(22).normal(size=(1, 4)))
        m = Tensor(np.random.default_rng(23).normal(size=(4, 4)))
        seen = {}
        orig = ad.softmax_last

        def spy(x, mask=None):
            out = orig(x, mask)
            seen["sums"] = out.data.sum(axis=-1)
            return out

        ad.softmax_last = spy
        try:
            cross_attention_fuse(h, m, cross, 1)
        finally:
            ad.softmax_last = orig
        npt.assert_allclose(seen["sums"], 1.0, atol=1e-12)

    def test_matches_loop_oracle(self):
        d = 4
        cross = self.cross_params(d, 24)
        rng = np.random.default_rng(25)
        h = rng.normal(size=(3, d))
        m = rng.normal(size=(3, d))
        got = cross_attention_fuse(Tensor(h), Tensor(m), cross, 2)
        # oracle: queries from h, keys/values from memory, residual added
        from oracles import ref_attention
        q = h @ cross["wq"].data
        k = m @ cross["wk"].data
        v = m @ cross["wv"].data
        heads = [ref_attention(q[:, i:i + 2], k[:, i:i + 2], v[:, i:i + 2])
                 for i in (0, 2)]
        want = h + np.concatenate(heads, axis=1) @ cross["wo"].data
        npt.assert_allclose(got.data, want, atol=1e-12)


class TestGateAttention:
    def setup_case(self, seed):
        layer, _ = layer_fixture(d=4, seed=seed)
        rng = np.random.default_rng(seed + 1)
        h = Tensor(rng.normal(size=(3, 4)))
        m = Tensor(rng.normal(size=(3, 4)))
        return layer, h, m

    def local_and_memory(self, layer, h, m, heads=1):
        loc = ref_multi_head_attention(h.data, layer.wq.data, layer.wk.data,
                                       layer.wv.data, np.eye(4), heads)
        q = h.data @ layer.wq.data
        k = m.data @ layer.wk.data
        v = m.data @ layer.wv.data
        from oracles import ref_attention
        dk = 4 // heads
        mem = np.concatenate([ref_attention(q[:, i * dk:(i + 1) * dk],
                                            k[:, i * dk:(i + 1) * dk],
                                            v[:, i * dk:(i + 1) * dk])
                              for i in range(heads)], axis=1)
        return loc, mem

    def test_closed_gate_gives_local(self):
        layer, h, m = self.setup_case(26)
        out = gate_attention_fuse(h, m, layer, Tensor(np.array([-40.0])), 1)
        loc, _ = self.local_and_memory(layer, h, m)
        npt.assert_allclose(out.data, loc @ layer.wo.data, atol=1e-12)

    def test_open_gate_gives_memory(self):
        layer, h, m = self.setup_case(27)
        out = gate_attention_fuse(h, m, layer, Tensor(np.array([40.0])), 1)
        _, mem = self.local_and_memory(layer, h, m)
        npt.assert_allclose(out.data, mem @ layer.wo.data, atol=1e-12)

    def test_half_gate_averages(self):
        layer, h, m = self.setup_case(28)
        out = gate_attention_fuse(h, m, layer, Tensor(np.zeros(1)), 1)
        loc, mem = self.local_and_memory(layer, h, m)
        npt.assert_allclose(out.data, (0.5 * mem + 0.5 * loc) @ layer.wo.data,
                            atol=1e-12)


class TestStructuralIdentities:
    def test_hundred_seeds(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            config = EncoderConfig(1, 8, 2, 16, 8, 8)
            store = init_encoder_params(config, rng)
            layer = LayerParams(store, "layer1.")
            h = Tensor(rng.normal(size=(4, 8)))
            plain = self_attention(h, layer, None, 2)
            off = memory_attention(h, Tensor(np.zeros((0, 8))), layer, 2,
                                   mem_mask=np.ones((1, 0), dtype=bool))
            assert plain.data.tobytes() == off.data.tobytes()
            dup = memory_attention(h, h, layer, 2)
            assert np.abs(dup.data - plain.data).max() < 1e-9
