import numpy as np
import pytest

from hogformer import tensor as T
from hogformer.config import ABLATION_ROWS, ModelConfig, ablation_config, preset
from hogformer.model import build_model, forward_restore
from hogformer.paramcount import count_parameters
from hogformer.tensor import ConfigurationError, InputValidationError


@pytest.fixture(scope="module")
def tiny():
    return build_model(preset("tiny"), seed=0)


def test_defaults_match_reference_settings():
    cfg = ModelConfig()
    assert (cfg.n_bin, cfg.ldr_patch) == (9, 8)
    m = build_model(preset("tiny"))
    for stage, heads in zip(m.encoders, cfg.heads_per_level):
        for blk in stage.blocks:
            assert blk.attn.bins == blk.attn.heads == heads


def test_same_seed_same_parameters():
    a, b = build_model(preset("tiny"), seed=5), build_model(preset("tiny"), seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_tiny_parameter_count():
    cfg = preset("tiny")
    assert count_parameters(cfg) == build_model(cfg).num_parameters() == 567_744


@pytest.mark.parametrize("name", ["small", "large"])
def test_preset_counts_agree(name):
    cfg = preset(name)
    assert count_parameters(cfg) == build_model(cfg).num_parameters()


@pytest.mark.parametrize("seed", range(5))
def test_random_config_counts_agree(seed):
    r = np.random.default_rng(seed)
    levels = int(r.integers(1, 5))
    width = 2 * int(r.integers(2, 7)) * 4
    heads = tuple(int(r.choice([1, 2, 4])) for _ in range(levels))
    cfg = ModelConfig(
        base_width=width,
        levels=levels,
        blocks_per_level=tuple(int(r.integers(0, 3)) for _ in range(levels)),
        heads_per_level=heads,
        n_bin=int(r.integers(3, 13)),
        ldr_patch=int(r.choice([4, 8])),
        ffn_expansion=int(r.integers(1, 4)),
        ldrconv=bool(r.integers(2)),
        dhogsa=bool(r.integers(2)),
        diff=bool(r.integers(2)),
        skip_mode=str(r.choice(["concat", "add"])),
    ).validate()
    assert count_parameters(cfg) == build_model(cfg).num_parameters()


@pytest.mark.parametrize("row", range(len(ABLATION_ROWS)))
def test_ablation_rows_count(row):
    cfg = ablation_config(row)
    assert count_parameters(cfg) == build_model(cfg).num_parameters()


def test_invalid_config_lists_every_problem():
    with pytest.raises(ConfigurationError) as err:
        ModelConfig(base_width=7, heads_per_level=(1, 2, 2)).validate()
    assert "base_width" in str(err.value) and "heads_per_level" in str(err.value)


def test_fresh_model_is_identity(tiny, rng):
    x = rng.random((3, 32, 48)).astype(np.float32)
    with T.no_grad():
        np.testing.assert_array_equal(forward_restore(tiny, x).data, x)


def test_odd_size_shape(tiny, rng):
    with T.no_grad():
        assert forward_restore(tiny, rng.random((3, 67, 91))).shape == (3, 67, 91)


def test_batched_input(tiny, rng):
    with T.no_grad():
        assert forward_restore(tiny, rng.random((2, 3, 16, 16))).shape == (2, 3, 16, 16)


def test_rejects_non_rgb(tiny, rng):
    with pytest.raises(InputValidationError):
        forward_restore(tiny, rng.random((1, 16, 16)))


def test_clamp_only_at_the_boundary(rng):
    m = build_model(preset("tiny"), seed=0)
    m.head.weight.data[:] = 1.0
    x = rng.random((3, 16, 16))
    with T.no_grad():
        raw = forward_restore(m, x).data
        clamped = forward_restore(m, x, clamp=True).data
    assert raw.max() > 1.0 or raw.min() < 0.0
    np.testing.assert_array_equal(clamped, np.clip(raw, 0, 1))


def test_continuity(rng):
    m = build_model(preset("tiny"), seed=0)
    r = np.random.default_rng(9)
    for _, p in m.named_parameters():
        if not p.data.any():
            p.data = 0.02 * r.standard_normal(p.shape)
    x = rng.random((3, 16, 16))
    d = 1e-3 * rng.standard_normal(x.shape)
    with T.no_grad(), T.default_dtype(np.float64):
        f0 = forward_restore(m, x).data
        f1 = forward_restore(m, x + d).data
        f2 = forward_restore(m, x + d / 10).data
    big, small = np.linalg.norm(f1 - f0), np.linalg.norm(f2 - f0)
    assert big < 10 * np.linalg.norm(d)
    assert small < big


def test_pad_multiple_for_tiny():
    assert preset("tiny").pad_multiple() == 16
