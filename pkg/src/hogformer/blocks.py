"""Building blocks: LDRConv, DHOGSA, DIFF and the HOG transformer block.

All blocks take and return NCHW tensors of unchanged shape.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .hog import hog_sort_keys, patch_sort_plan, pixel_sort_plan, soft_cell_histogram
from .tensor import ConfigurationError, Module, Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(T.get_default_dtype())


class Conv(Module):
    """Bias-free square convolution with same-size zero padding."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 1, groups: int = 1, zero: bool = False):
        shape = (c_out, c_in // groups, k, k)
        data = np.zeros(shape, dtype=T.get_default_dtype()) if zero else trunc_normal(rng, shape)
        self.weight = Parameter(data)
        self.k = k
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, padding=self.k // 2, groups=self.groups)


def depthwise(rng, c: int, k: int) -> Conv:
    return Conv(rng, c, c, k, groups=c)


class LayerNorm(Module):
    def __init__(self, c: int):
        dtype = T.get_default_dtype()
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


def _align(x: Tensor, multiple: int) -> tuple[Tensor, int, int]:
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph or pw:
        x = T.pad2d(x, (0, ph, 0, pw), mode="reflect")
    return x, H, W


# ---------------------------------------------------------------------------
# LDRConv
# ---------------------------------------------------------------------------


def hog_prior_modulation(f1: Tensor, projection: Tensor, patch: int, n_bin: int) -> Tensor:
    """Per-patch soft HOG histogram, projected to ``C1`` values and spread
    over the patch. ``projection`` has shape ``(C1, n_bin)`` and no bias."""
    N, C1, H, W = f1.shape
    hist = soft_cell_histogram(f1, cell=patch, n_bin=n_bin)  # N, cy, cx, n_bin
    cy, cx = hist.shape[1:3]
    prior = T.matmul(hist, T.transpose(projection, (1, 0)))  # N, cy, cx, C1
    prior = T.transpose(prior, (0, 3, 1, 2))
    prior = T.reshape(prior, (N, C1, cy, 1, cx, 1))
    prior = T.broadcast_to(prior, (N, C1, cy, patch, cx, patch))
    return T.reshape(prior, (N, C1, H, W))


class LDRConv(Module):
    """Patch-sorted half of the channels plus a learnable HOG prior, followed
    by pointwise and depthwise 3x3 convolution."""

    def __init__(self, rng, c: int, patch: int = 8, n_bin: int = 9, unsort: bool = True):
        if c % 2:
            raise ConfigurationError(f"LDRConv needs an even channel count, got {c}")
        self.hog_projection = Parameter(trunc_normal(rng, (c // 2, n_bin)))
        self.pointwise = Conv(rng, c, c, 1)
        self.depthwise = depthwise(rng, c, 3)
        self.patch = patch
        self.n_bin = n_bin
        self.unsort = unsort

    def forward(self, x: Tensor) -> Tensor:
        xp, H, W = _align(x, self.patch)
        N, C, Hp, Wp = xp.shape
        f1, f2 = T.split(xp, 2, axis=1)
        plan = patch_sort_plan(hog_sort_keys(f1, self.n_bin), self.patch)
        flat = T.reshape(f1, (N, C // 2, Hp * Wp))
        prior = hog_prior_modulation(f1, self.hog_projection, self.patch, self.n_bin)
        f1 = T.gather_axis(flat, plan.perm, axis=-1) + T.reshape(prior, flat.shape)
        if self.unsort:
            f1 = T.gather_axis(f1, plan.inv, axis=-1)
        f1 = T.reshape(f1, (N, C // 2, Hp, Wp))
        out = self.depthwise(self.pointwise(T.concat([f1, f2], axis=1)))
        return T.crop2d(out, H, W) if (Hp, Wp) != (H, W) else out


# ---------------------------------------------------------------------------
# Histogram reshaping and attention
# ---------------------------------------------------------------------------


def histogram_reshape(seq: Tensor, mode: str, bins: int) -> Tensor:
    """Segment a sorted ``(..., d, L)`` sequence for segment-local attention.

    ``"bhogr"`` gives ``bins`` segments of length ``L / bins``; ``"fhogr"``
    gives ``L / bins`` segments of length ``bins``. Output layout is
    ``(..., segments, d, segment_length)``.
    """
    *lead, d, L = seq.shape
    if L % bins:
        raise ConfigurationError(f"histogram_reshape: length {L} not divisible by bins={bins}")
    if mode == "bhogr":
        segments, length = bins, L // bins
    elif mode == "fhogr":
        segments, length = L // bins, bins
    else:
        raise ConfigurationError(f"histogram_reshape: unknown mode {mode!r}")
    n = len(lead)
    y = T.reshape(seq, (*lead, d, segments, length))
    return T.transpose(y, (*range(n), n + 1, n, n + 2))


def histogram_unreshape(seg: Tensor) -> Tensor:
    """Inverse of :func:`histogram_reshape`."""
    *lead, segments, d, length = seg.shape
    n = len(lead)
    y = T.transpose(seg, (*range(n), n + 1, n, n + 2))
    return T.reshape(y, (*lead, d, segments * length))


def transposed_attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """Channel-by-channel attention within each segment: ``softmax(q k^T) v``."""
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * scale
    return T.matmul(T.softmax_last(scores), v)


class DHOGSA(Module):
    """HOG-sorted self-attention with bin-wise and frequency-wise branches."""

    def __init__(self, rng, c: int, heads: int, cfg):
        if c % heads:
            raise ConfigurationError(f"DHOGSA: width {c} not divisible by heads {heads}")
        self.ldr = LDRConv(rng, c, cfg.ldr_patch, cfg.n_bin, unsort=not cfg.ldr_no_unsort) if cfg.ldrconv else None
        self.qkv = Conv(rng, c, 5 * c, 1)
        self.qkv_dw = depthwise(rng, 5 * c, 3)
        self.project_out = Conv(rng, c, c, 1)
        self.heads = heads
        self.bins = heads
        self.n_bin = cfg.n_bin
        self.branches = tuple(b for b, on in (("bhogr", cfg.bhogr), ("fhogr", cfg.fhogr)) if on)
        d_head = c // heads
        self.scale = 1.0 / math.sqrt(heads if cfg.sqrt_heads_scaling else d_head)

    def forward(self, x: Tensor, attend=None) -> Tensor:
        """``attend(q, k, v, scale)`` replaces the segment attention (test hook)."""
        attend = attend or transposed_attention
        if self.ldr is not None:
            x = self.ldr(x)
        N, C, H, W = x.shape
        L = H * W
        if L % self.bins:
            raise ConfigurationError(f"DHOGSA: H*W={L} not divisible by bins={self.bins}")
        qkv = self.qkv_dw(self.qkv(x))
        qb, kb, qf, kf, v = T.split(qkv, 5, axis=1)
        plan = pixel_sort_plan(T.reshape(Tensor(hog_sort_keys(v, self.n_bin)), (N, C, L)))
        d = C // self.heads

        def arrange(t):
            t = T.gather_axis(T.reshape(t, (N, C, L)), plan.perm, axis=-1)
            return T.reshape(t, (N, self.heads, d, L))

        vs = arrange(v)
        pairs = {"bhogr": (qb, kb), "fhogr": (qf, kf)}
        out = None
        for mode in self.branches:
            q, k = pairs[mode]
            seg = attend(
                histogram_reshape(arrange(q), mode, self.bins),
                histogram_reshape(arrange(k), mode, self.bins),
                histogram_reshape(vs, mode, self.bins),
                self.scale,
            )
            branch = histogram_unreshape(seg)
            out = branch if out is None else out * branch
        out = T.gather_axis(T.reshape(out, (N, C, L)), plan.inv, axis=-1)
        return self.project_out(T.reshape(out, (N, C, H, W)))


class ChannelAttention(Module):
    """Unsorted transposed attention over all pixels (ablation counterpart)."""

    def __init__(self, rng, c: int, heads: int, cfg):
        self.ldr = LDRConv(rng, c, cfg.ldr_patch, cfg.n_bin, unsort=not cfg.ldr_no_unsort) if cfg.ldrconv else None
        self.qkv = Conv(rng, c, 3 * c, 1)
        self.qkv_dw = depthwise(rng, 3 * c, 3)
        self.project_out = Conv(rng, c, c, 1)
        self.heads = heads
        self.scale = 1.0 / math.sqrt(heads if cfg.sqrt_heads_scaling else c // heads)

    def forward(self, x: Tensor) -> Tensor:
        if self.ldr is not None:
            x = self.ldr(x)
        N, C, H, W = x.shape
        q, k, v = (
            T.reshape(t, (N, self.heads, C // self.heads, H * W))
            for t in T.split(self.qkv_dw(self.qkv(x)), 3, axis=1)
        )
        out = transposed_attention(q, k, v, self.scale)
        return self.project_out(T.reshape(out, (N, C, H, W)))


# ---------------------------------------------------------------------------
# Feed-forward
# ---------------------------------------------------------------------------


def channel_shuffle(x: Tensor, groups: int = 2) -> Tensor:
    N, C, H, W = x.shape
    y = T.reshape(x, (N, groups, C // groups, H, W))
    y = T.transpose(y, (0, 2, 1, 3, 4))
    return T.reshape(y, (N, C, H, W))


class DIFF(Module):
    """Two-scale depthwise branches with cross sigmoid gating, a two-group
    channel shuffle and pointwise aggregation."""

    def __init__(self, rng, c: int, expansion: int = 2):
        hidden = expansion * c
        self.expand = Conv(rng, c, 2 * hidden, 1)
        self.dw3 = depthwise(rng, hidden, 3)
        self.dw5 = depthwise(rng, hidden, 5)
        self.aggregate = Conv(rng, 2 * hidden, c, 1)

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor]:
        u, w = T.split(self.expand(x), 2, axis=1)
        return self.dw3(u), self.dw5(w)

    def forward(self, x: Tensor) -> Tensor:
        u, w = self.gates(x)
        mixed = T.concat([u * T.sigmoid(w), w * T.sigmoid(u)], axis=1)
        return self.aggregate(channel_shuffle(mixed, 2))


class FeedForward(Module):
    """Plain pointwise GELU feed-forward (ablation counterpart of DIFF)."""

    def __init__(self, rng, c: int, expansion: int = 2):
        self.project_in = Conv(rng, c, expansion * c, 1)
        self.project_out = Conv(rng, expansion * c, c, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.project_out(T.gelu(self.project_in(x)))


class HOGTB(Module):
    """``x + attn(LN(x))`` followed by ``x + ffn(LN(x))``."""

    def __init__(self, rng, c: int, heads: int, cfg):
        self.norm1 = LayerNorm(c)
        self.attn = DHOGSA(rng, c, heads, cfg) if cfg.dhogsa else ChannelAttention(rng, c, heads, cfg)
        self.norm2 = LayerNorm(c)
        self.ffn = DIFF(rng, c, cfg.ffn_expansion) if cfg.diff else FeedForward(rng, c, cfg.ffn_expansion)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))
