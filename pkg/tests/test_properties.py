"""Randomised structural invariants (hypothesis, >= 100 cases per property)."""

import os
import tempfile

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from hogformer import hog
from hogformer import tensor as T
from hogformer.blocks import DHOGSA, DIFF, HOGTB, ChannelAttention, FeedForward, LDRConv
from hogformer.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from hogformer.config import ModelConfig, preset
from hogformer.model import Downsample, Upsample, build_model, forward_restore
from hogformer.tensor import Tensor

CASES = settings(max_examples=100, deadline=None)
seeds = st.integers(0, 2**32 - 1)


def arr(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


@CASES
@given(seeds, st.integers(1, 3), st.integers(1, 40), st.booleans())
def test_pixel_sort_plan_roundtrip(seed, rows, length, ties):
    keys = arr(seed, (rows, length))
    if ties:
        keys = np.round(keys)  # many equal keys exercise the stable order
    plan = hog.pixel_sort_plan(keys)
    s = np.take_along_axis(keys, plan.perm, -1)
    assert np.all(np.diff(s, axis=-1) >= 0)
    np.testing.assert_array_equal(np.take_along_axis(s, plan.inv, -1), keys)


@CASES
@given(seeds, st.sampled_from([2, 4, 8]), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_patch_sort_plan_roundtrip(seed, patch, py, px, c):
    x = arr(seed, (1, c, py * patch, px * patch))
    plan = hog.patch_sort_plan(x, patch)
    flat = Tensor(x.reshape(1, c, -1))
    back = T.gather_axis(T.gather_axis(flat, plan.perm, -1), plan.inv, -1)
    np.testing.assert_array_equal(back.data, flat.data)
    np.testing.assert_array_equal(np.sort(plan.perm[0, 0]), np.arange(x.shape[-1] * x.shape[-2]))


@CASES
@given(seeds, st.integers(1, 4), st.integers(1, 30))
def test_gather_scatter_inverse(seed, rows, length):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((rows, length)))
    perm = np.argsort(r.random((rows, length)), axis=-1)
    np.testing.assert_array_equal(T.scatter_axis(T.gather_axis(x, perm, -1), perm, -1).data, x.data)
    np.testing.assert_array_equal(T.gather_axis(T.scatter_axis(x, perm, -1), perm, -1).data, x.data)
    np.testing.assert_array_equal(T.invert_permutation(T.invert_permutation(perm)), perm)


@CASES
@given(seeds, st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 3]))
def test_pixel_shuffle_roundtrip(seed, n, c, h, w, r):
    x = Tensor(arr(seed, (n, c, h * r, w * r)))
    down = T.pixel_unshuffle(x, r)
    assert down.shape == (n, c * r * r, h, w)
    np.testing.assert_array_equal(T.pixel_shuffle(down, r).data, x.data)


@CASES
@given(seeds, st.integers(1, 12), st.floats(0.01, 50))
def test_softmax_normalised(seed, width, scale):
    p = T.softmax_last(Tensor(scale * arr(seed, (3, width)))).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)


BLOCK_CFG = ModelConfig(base_width=8, levels=1, blocks_per_level=(1,), heads_per_level=(2,))
BLOCKS = {
    "ldrconv": LDRConv(np.random.default_rng(0), 8),
    "dhogsa": DHOGSA(np.random.default_rng(1), 8, 2, BLOCK_CFG),
    "channel_attention": ChannelAttention(np.random.default_rng(2), 8, 2, BLOCK_CFG),
    "diff": DIFF(np.random.default_rng(3), 8),
    "ffn": FeedForward(np.random.default_rng(4), 8),
    "hogtb": HOGTB(np.random.default_rng(5), 8, 2, BLOCK_CFG),
}
RESAMPLE = {"down": Downsample(np.random.default_rng(6), 8), "up": Upsample(np.random.default_rng(7), 8)}


@CASES
@given(seeds, st.sampled_from(sorted(BLOCKS)), st.integers(1, 2), st.integers(1, 10), st.integers(2, 20))
def test_blocks_preserve_shape(seed, name, n, half_h, w):
    # even height keeps H*W divisible by the two attention segments
    x = Tensor(arr(seed, (n, 8, 2 * half_h, w)))
    with T.no_grad():
        y = BLOCKS[name](x)
    assert y.shape == x.shape and np.all(np.isfinite(y.data))


@CASES
@given(seeds, st.sampled_from(["down", "up"]), st.integers(1, 8), st.integers(1, 8))
def test_resampling_shapes(seed, name, h, w):
    x = Tensor(arr(seed, (1, 8, 2 * h, 2 * w)))
    with T.no_grad():
        y = RESAMPLE[name](x)
    want = (1, 16, h, w) if name == "down" else (1, 4, 4 * h, 4 * w)
    assert y.shape == want


TINY = build_model(preset("tiny"), seed=0)


@CASES
@given(seeds, st.integers(2, 40), st.integers(2, 40))
def test_identity_at_init(seed, h, w):
    x = np.random.default_rng(seed).random((3, h, w)).astype(np.float32)
    with T.no_grad():
        np.testing.assert_array_equal(forward_restore(TINY, x).data, x)


@CASES
@given(seeds, st.integers(1, 4), st.integers(1, 4), st.sampled_from([4, 8]), st.integers(3, 12), st.floats(1e-3, 1e3))
def test_vote_conservation(seed, cy, cx, cell, n_bin, scale):
    x = scale * np.random.default_rng(seed).random((3, cy * cell, cx * cell))
    with T.default_dtype(np.float64), T.no_grad():
        hist = hog.soft_cell_histogram(x, cell, n_bin).data
        m = hog.gradient_magnitude(hog.sobel_gradients(Tensor(x.mean(0)))).data
    per_cell = m.reshape(cy, cell, cx, cell).sum(axis=(1, 3))
    np.testing.assert_allclose(hist.sum(-1), per_cell, rtol=1e-5)
    assert np.all(hist >= 0)


SMALL_CFG = ModelConfig(base_width=8, levels=2, blocks_per_level=(1, 1), heads_per_level=(1, 2))


@CASES
@given(seeds, st.integers(0, 10**6))
def test_checkpoint_bit_exact(seed, step):
    model = build_model(SMALL_CFG, seed=0)
    r = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = r.standard_normal(p.shape).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.hogf")
        save_checkpoint(model, path, step=step)
        ck = load_checkpoint(path)
        assert ck.step == step
        assert checkpoint_bytes(ck.model, step) == open(path, "rb").read()
    for (_, a), (_, b) in zip(model.named_parameters(), ck.model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
