"""U-shaped HOG transformer for all-in-one restoration."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import HOGTB, Conv, depthwise
from .config import ModelConfig
from .tensor import ConfigurationError, InputValidationError, Module, Tensor


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Downsample(Module):
    """Pixel-unshuffle by 2, then a pointwise conv from 4C to 2C."""

    def __init__(self, rng, c: int):
        self.reduce = Conv(rng, 4 * c, 2 * c, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.reduce(T.pixel_unshuffle(x, 2))


class Upsample(Module):
    """Pointwise conv from C to 2C, then pixel-shuffle by 2 (to C/2)."""

    def __init__(self, rng, c: int):
        self.expand = Conv(rng, c, 2 * c, 1)

    def forward(self, x: Tensor) -> Tensor:
        return T.pixel_shuffle(self.expand(x), 2)


class CoarseSkip(Module):
    """Average pool, pointwise and depthwise conv on encoder features, then
    concatenation with decoder features and a pointwise fusion."""

    def __init__(self, rng, c: int):
        self.pointwise = Conv(rng, c, c, 1)
        self.depthwise = depthwise(rng, c, 3)
        self.fuse = Conv(rng, 2 * c, c, 1)

    def forward(self, enc: Tensor, dec: Tensor) -> Tensor:
        return coarse_skip_fuse(enc, dec, self)


def coarse_skip_fuse(enc: Tensor, dec: Tensor, p: CoarseSkip) -> Tensor:
    if enc.shape[-2:] != dec.shape[-2:]:
        raise RuntimeError(
            f"coarse skip spatial mismatch {enc.shape[-2:]} vs {dec.shape[-2:]} (padding bug)"
        )
    processed = p.depthwise(p.pointwise(T.avg_pool2d(enc, 3, stride=1, padding=1)))
    return p.fuse(T.concat([processed, dec], axis=1))


class HogformerModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        L = cfg.levels
        self.stem = Conv(rng, 3, cfg.base_width, 3)
        self.encoders = []
        self.downs = []
        for lvl in range(L):
            c = cfg.width(lvl)
            heads = cfg.heads_per_level[lvl]
            self.encoders.append(Stage(HOGTB(rng, c, heads, cfg) for _ in range(cfg.blocks_per_level[lvl])))
            if lvl < L - 1:
                self.downs.append(Downsample(rng, c))
        self.ups = []
        self.skip_fusers = []
        self.decoders = []
        self.coarse_skips = []
        for lvl in range(L - 1):
            c = cfg.width(lvl)
            heads = cfg.heads_per_level[lvl]
            self.ups.append(Upsample(rng, 2 * c))
            if cfg.skip_mode == "concat":
                self.skip_fusers.append(Conv(rng, 2 * c, c, 1))
            self.decoders.append(Stage(HOGTB(rng, c, heads, cfg) for _ in range(cfg.blocks_per_level[lvl])))
            self.coarse_skips.append(CoarseSkip(rng, c))
        self.head = Conv(rng, cfg.base_width, 3, 3, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        """Residual restoration of an aligned NCHW batch (no padding, no clamp)."""
        L = self.config.levels
        feats = self.stem(x)
        skips = []
        for lvl in range(L - 1):
            feats = self.encoders[lvl](feats)
            skips.append(feats)
            feats = self.downs[lvl](feats)
        feats = self.encoders[L - 1](feats)
        for lvl in reversed(range(L - 1)):
            feats = self.ups[lvl](feats)
            if self.skip_fusers:
                feats = self.skip_fusers[lvl](T.concat([feats, skips[lvl]], axis=1))
            else:
                feats = feats + skips[lvl]
            feats = self.decoders[lvl](feats)
            feats = self.coarse_skips[lvl](skips[lvl], feats)
        return x + self.head(feats)


def build_model(cfg: ModelConfig, seed: int = 0) -> HogformerModel:
    return HogformerModel(cfg, seed)


def forward_restore(model: HogformerModel, img, clamp: bool = False) -> Tensor:
    """Restore a ``3 x H x W`` image or ``N x 3 x H x W`` batch.

    The input is reflect-padded to the model's alignment multiple and the
    output cropped back. ``clamp`` clips to [0, 1] and is meant only for
    emitting images, never for the training loss.
    """
    x = T.as_tensor(img)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise InputValidationError(f"forward_restore expects 3 x H x W input, got shape {tuple(T.as_tensor(img).shape)}")
    H, W = x.shape[-2:]
    m = model.config.pad_multiple()
    ph, pw = (-H) % m, (-W) % m
    if (ph and H < 2) or (pw and W < 2):
        raise ConfigurationError(f"image {H}x{W} too small to pad")
    xp = T.pad2d(x, (0, ph, 0, pw), mode="reflect") if ph or pw else x
    out = model(xp)
    if ph or pw:
        out = T.crop2d(out, H, W)
    if clamp:
        out = T.Tensor(np.clip(out.data, 0.0, 1.0))
    if single:
        out = T.reshape(out, out.shape[1:])
    return out
