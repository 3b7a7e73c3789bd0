import numpy as np
import pytest

from hogformer import tensor as T
from hogformer.blocks import (
    DHOGSA,
    DIFF,
    HOGTB,
    LDRConv,
    channel_shuffle,
    histogram_reshape,
    histogram_unreshape,
    hog_prior_modulation,
)
from hogformer.config import preset
from hogformer.gradcheck import _randomize, finite_diff_check
from hogformer.model import CoarseSkip, coarse_skip_fuse
from hogformer.tensor import ConfigurationError, Tensor

CFG = preset("tiny")


def block_rng():
    return np.random.default_rng(7)


class TestLDRConv:
    def test_odd_width_rejected(self):
        with pytest.raises(ConfigurationError):
            LDRConv(block_rng(), 5)

    def test_constant_input_reduces_to_conv_path(self, f64):
        m = LDRConv(block_rng(), 4, patch=4)
        _randomize(m, block_rng())
        x = Tensor(np.full((1, 4, 8, 8), 0.3))
        ref = m.depthwise(m.pointwise(x))
        # the only residue is the magnitude floor sqrt(1e-12) voting per pixel
        np.testing.assert_allclose(m(x).data, ref.data, atol=1e-4)

    def test_zero_projection_is_plain_conv(self, rng, f64):
        m = LDRConv(block_rng(), 4, patch=4)
        _randomize(m, block_rng())
        m.hog_projection.data[:] = 0
        x = Tensor(rng.random((2, 4, 8, 8)))
        np.testing.assert_allclose(m(x).data, m.depthwise(m.pointwise(x)).data, atol=1e-12)

    def test_unaligned_input_keeps_shape(self, rng):
        assert LDRConv(block_rng(), 4, patch=4)(Tensor(rng.random((1, 4, 7, 10)))).shape == (1, 4, 7, 10)

    def test_gradcheck(self, rng, f64):
        m = LDRConv(block_rng(), 4, patch=4)
        _randomize(m, block_rng())
        x = Tensor(rng.standard_normal((1, 4, 8, 8)))
        assert finite_diff_check(lambda t: T.sum_(m(t)), [x]) < 1e-4


class TestPrior:
    def test_constant_gives_zero(self, rng):
        proj = Tensor(rng.standard_normal((2, 9)))
        out = hog_prior_modulation(Tensor(np.full((1, 2, 8, 8), 0.5)), proj, 4, 9)
        # 16 pixels per cell, each voting the 1e-6 magnitude floor
        np.testing.assert_allclose(out.data, 0.0, atol=16e-6 * np.abs(proj.data).sum(axis=1).max())

    def test_shape_and_linearity(self, rng, f64):
        proj = Tensor(rng.standard_normal((3, 9)))
        f1 = rng.random((1, 3, 8, 8))
        a = hog_prior_modulation(Tensor(f1), proj, 4, 9).data
        b = hog_prior_modulation(Tensor(2 * f1), proj, 4, 9).data
        assert a.shape == f1.shape
        np.testing.assert_allclose(b, 2 * a, rtol=1e-5)  # up to the magnitude floor

    def test_constant_over_each_patch(self, rng):
        out = hog_prior_modulation(Tensor(rng.random((1, 2, 8, 8))), Tensor(rng.random((2, 9))), 4, 9).data
        blocks = out.reshape(1, 2, 2, 4, 2, 4)
        assert np.all(blocks == blocks[:, :, :, :1, :, :1])


class TestReshape:
    def test_segment_shapes(self):
        seq = Tensor(np.arange(64.0).reshape(2, 32))
        assert histogram_reshape(seq, "bhogr", 4).shape == (4, 2, 8)
        assert histogram_reshape(seq, "fhogr", 4).shape == (8, 2, 4)

    def test_bhogr_segments_are_contiguous_runs(self):
        seq = np.arange(32.0).reshape(1, 32)
        seg = histogram_reshape(Tensor(seq), "bhogr", 4).data
        np.testing.assert_array_equal(seg[1, 0], np.arange(8, 16))

    @pytest.mark.parametrize("mode", ["bhogr", "fhogr"])
    def test_roundtrip(self, rng, mode):
        x = rng.random((2, 3, 5, 24))
        np.testing.assert_array_equal(histogram_unreshape(histogram_reshape(Tensor(x), mode, 6)).data, x)

    def test_divisibility(self):
        with pytest.raises(ConfigurationError):
            histogram_reshape(Tensor(np.zeros((2, 30))), "bhogr", 4)


class TestDHOGSA:
    def test_shape(self, rng):
        m = DHOGSA(block_rng(), 8, 2, CFG)
        assert m(Tensor(rng.random((2, 8, 8, 8)))).shape == (2, 8, 8, 8)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            DHOGSA(block_rng(), 6, 4, CFG)

    def test_constant_input_uniform_attention(self):
        m = DHOGSA(block_rng(), 4, 2, CFG)
        seen = []

        def spy(q, k, v, scale):
            a = T.softmax_last(T.matmul(q, T.swapaxes(k, -1, -2)) * scale)
            seen.append(a.data)
            return T.matmul(a, v)

        m(Tensor(np.full((1, 4, 8, 8), 0.25)), attend=spy)
        assert len(seen) == 2
        for a in seen:
            np.testing.assert_allclose(a, 1.0 / a.shape[-1], atol=1e-6)

    def test_deterministic(self, rng):
        m = DHOGSA(block_rng(), 4, 2, CFG)
        x = Tensor(rng.random((1, 4, 8, 8)))
        np.testing.assert_array_equal(m(x).data, m(x).data)

    def test_gradcheck(self, f64):
        r = np.random.default_rng(2)
        m = DHOGSA(r, 4, 2, CFG)
        _randomize(m, r)
        x = Tensor(r.standard_normal((1, 4, 8, 8)))
        assert finite_diff_check(lambda t: T.sum_(m(t)), [x]) < 1e-4


class TestDIFF:
    def test_shape(self, rng):
        assert DIFF(block_rng(), 6)(Tensor(rng.random((1, 6, 5, 7)))).shape == (1, 6, 5, 7)

    def test_zero_weights_give_zero(self, rng):
        m = DIFF(block_rng(), 4)
        for conv in (m.dw3, m.dw5, m.aggregate):
            conv.weight.data[:] = 0
        np.testing.assert_array_equal(m(Tensor(rng.random((1, 4, 6, 6)))).data, 0.0)

    def test_gates_open_interval(self, rng):
        u, w = DIFF(block_rng(), 4).gates(Tensor(rng.standard_normal((1, 4, 6, 6)) * 5))
        for g in (T.sigmoid(u).data, T.sigmoid(w).data):
            assert np.all((g > 0) & (g < 1))

    def test_channel_shuffle_interleaves(self):
        x = np.arange(4.0).reshape(1, 4, 1, 1)
        assert channel_shuffle(Tensor(x), 2).data.ravel().tolist() == [0, 2, 1, 3]


class TestHOGTB:
    def test_zero_projections_identity(self, rng):
        m = HOGTB(block_rng(), 8, 2, CFG)
        m.attn.project_out.weight.data[:] = 0
        m.ffn.aggregate.weight.data[:] = 0
        x = rng.random((1, 8, 8, 8))
        np.testing.assert_array_equal(m(Tensor(x)).data, x)

    def test_shape(self, rng):
        assert HOGTB(block_rng(), 8, 4, CFG)(Tensor(rng.random((1, 8, 16, 8)))).shape == (1, 8, 16, 8)

    def test_gradcheck(self, f64):
        r = np.random.default_rng(2)
        m = HOGTB(r, 4, 2, CFG)
        _randomize(m, r)
        x = Tensor(r.standard_normal((1, 4, 8, 8)))
        probe = Tensor(r.standard_normal((1, 4, 8, 8)))
        assert finite_diff_check(lambda t: T.sum_(m(t) * probe), [x]) < 1e-4


class TestCoarseSkip:
    def test_pass_through_when_fusion_selects_decoder(self, rng):
        p = CoarseSkip(block_rng(), 4)
        p.fuse.weight.data[:] = 0
        p.fuse.weight.data[np.arange(4), 4 + np.arange(4), 0, 0] = 1
        enc, dec = rng.random((1, 4, 6, 6)), rng.random((1, 4, 6, 6))
        np.testing.assert_allclose(coarse_skip_fuse(Tensor(enc), Tensor(dec), p).data, dec, atol=1e-6)

    def test_shapes(self, rng):
        out = CoarseSkip(block_rng(), 4)(Tensor(rng.random((2, 4, 6, 10))), Tensor(rng.random((2, 4, 6, 10))))
        assert out.shape == (2, 4, 6, 10)

    def test_spatial_mismatch_is_internal_error(self, rng):
        with pytest.raises(RuntimeError, match="padding bug"):
            CoarseSkip(block_rng(), 4)(Tensor(rng.random((1, 4, 6, 6))), Tensor(rng.random((1, 4, 4, 4))))

    def test_stride_one_pool_keeps_extent(self, rng):
        assert T.avg_pool2d(Tensor(rng.random((1, 2, 5, 7))), 3, stride=1, padding=1).shape == (1, 2, 5, 7)
