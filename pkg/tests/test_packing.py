import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curate.errors import BadRate, DimensionMismatch, EmptyInput, LengthMismatch, ShapeMismatch
from curate.packing import (
    LAYERSCALE_INIT,
    AttentionParams,
    BlockDiagonalMask,
    StochasticDepthConfig,
    attention_forward,
    keep_count,
    kept_indices,
    layerscale_apply,
    pack,
    packed_forward,
    stochastic_depth_slice,
    unpack,
)
from oracles import loop_attention


def residual(x):
    return np.sin(2.0 * x) + 0.5


class TestPack:
    def test_boundaries(self, rng):
        b = pack([rng.standard_normal((n, 4)) for n in (3, 1, 5)])
        assert b.boundaries == (0, 3, 4, 9)
        assert b.lengths == [3, 1, 5]

    @given(st.lists(st.integers(1, 10), min_size=1, max_size=6))
    def test_unpack_inverts_pack(self, lengths):
        rng = np.random.default_rng(len(lengths))
        seqs = [rng.standard_normal((n, 3)) for n in lengths]
        for a, b in zip(unpack(pack(seqs)), seqs):
            np.testing.assert_array_equal(a, b)

    def test_errors(self):
        with pytest.raises(EmptyInput):
            pack([])
        with pytest.raises(DimensionMismatch):
            pack([np.ones((2, 3)), np.ones((2, 4))])
        with pytest.raises(EmptyInput):
            pack([np.ones((0, 3))])


class TestMask:
    def test_membership(self):
        m = BlockDiagonalMask((0, 2, 5))
        assert m(0, 1) and m(2, 4)
        assert not m(1, 2)
        assert not m(0, 5)
        assert m.allowed_count() == 4 + 9
        assert m.to_dense().sum() == 13

    def test_dense_is_block_diagonal(self):
        dense = BlockDiagonalMask((0, 1, 3)).to_dense()
        np.testing.assert_array_equal(dense, [[1, 0, 0], [0, 1, 1], [0, 1, 1]])


class TestAttention:
    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_matches_loop_oracle(self, rng, heads):
        params = AttentionParams.random(8, heads, rng)
        x = rng.standard_normal((5, 8))
        np.testing.assert_allclose(attention_forward(params, x),
                                   loop_attention(x, params.wq, params.wk, params.wv, params.wo, heads), atol=1e-12)

    def test_packed_equals_separate(self, rng):
        params = AttentionParams.random(16, 4, rng)
        seqs = [rng.standard_normal((n, 16)) for n in (1, 7, 3)]
        out = packed_forward(params, pack(seqs)).unpack()
        for got, s in zip(out, seqs):
            np.testing.assert_allclose(got, attention_forward(params, s), atol=1e-12)

    def test_single_token_returns_projected_value(self, rng):
        params = AttentionParams.random(4, 1, rng)
        x = rng.standard_normal((1, 4))
        np.testing.assert_allclose(attention_forward(params, x), x @ params.wv @ params.wo, atol=1e-14)

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeMismatch):
            AttentionParams.random(6, 4, rng)
        params = AttentionParams.random(4, 2, rng)
        with pytest.raises(ShapeMismatch):
            attention_forward(params, np.ones((3, 5)))
        with pytest.raises(ShapeMismatch):
            attention_forward(params, np.ones((3, 4)), np.ones((2, 2), bool))


class TestStochasticDepth:
    @pytest.mark.parametrize("b,d,k", [(10, 0.4, 6), (10, 0.0, 10), (1, 0.9, 1), (4, 0.5, 2), (7, 0.5, 4), (3, 0.99, 1)])
    def test_keep_count(self, b, d, k):
        assert keep_count(b, d) == k

    def test_bad_rate(self):
        with pytest.raises(BadRate):
            StochasticDepthConfig(1.0)
        with pytest.raises(BadRate):
            StochasticDepthConfig(-0.1)

    def test_residual_called_on_kept_slice_only(self, rng):
        x = rng.standard_normal((10, 3))
        seen = []

        def fn(v):
            seen.append(v.copy())
            return residual(v)

        cfg = StochasticDepthConfig(0.4, seed=5)
        out = stochastic_depth_slice(x, cfg, fn)
        keep = kept_indices(10, cfg)
        assert len(seen) == 1 and len(seen[0]) == 6
        np.testing.assert_array_equal(seen[0], x[keep])
        dropped = np.setdiff1d(np.arange(10), keep)
        np.testing.assert_array_equal(out[dropped], x[dropped])
        np.testing.assert_allclose(out[keep], x[keep] + residual(x[keep]) / 0.6)

    @given(st.integers(1, 30), st.floats(0, 0.95), st.integers(0, 2**63))
    def test_equals_mask_reference(self, b, d, seed):
        x = np.random.default_rng(b).standard_normal((b, 4))
        cfg = StochasticDepthConfig(d, seed)
        keep = np.zeros(b, bool)
        keep[kept_indices(b, cfg)] = True
        ref = np.where(keep[:, None], x + residual(x) / (1 - d), x)
        np.testing.assert_array_equal(stochastic_depth_slice(x, cfg, residual), ref)

    def test_zero_rate_is_plain_residual(self, rng):
        x = rng.standard_normal((5, 2))
        np.testing.assert_array_equal(stochastic_depth_slice(x, StochasticDepthConfig(0.0, 3), residual),
                                      x + residual(x))


class TestLayerScale:
    def test_scales_channels(self):
        gamma = np.full(3, LAYERSCALE_INIT)
        np.testing.assert_allclose(layerscale_apply(gamma, np.ones((2, 3))), 1e-5)

    def test_width_mismatch(self):
        with pytest.raises(LengthMismatch):
            layerscale_apply(np.ones(2), np.ones((2, 3)))
