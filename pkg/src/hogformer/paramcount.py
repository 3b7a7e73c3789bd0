"""Closed-form parameter count for a ModelConfig.

Kept independent of the module classes so the two can be checked against
each other.
"""

from __future__ import annotations

from .config import ModelConfig


def conv(c_in: int, c_out: int, k: int = 1, groups: int = 1) -> int:
    return c_out * (c_in // groups) * k * k


def ldrconv(c: int, n_bin: int) -> int:
    return (c // 2) * n_bin + conv(c, c) + conv(c, c, 3, c)


def attention(c: int, cfg: ModelConfig) -> int:
    n = ldrconv(c, cfg.n_bin) if cfg.ldrconv else 0
    streams = 5 if cfg.dhogsa else 3
    return n + conv(c, streams * c) + conv(streams * c, streams * c, 3, streams * c) + conv(c, c)


def feed_forward(c: int, cfg: ModelConfig) -> int:
    hidden = cfg.ffn_expansion * c
    if cfg.diff:
        return conv(c, 2 * hidden) + conv(hidden, hidden, 3, hidden) + conv(hidden, hidden, 5, hidden) + conv(2 * hidden, c)
    return conv(c, hidden) + conv(hidden, c)


def hogtb(c: int, cfg: ModelConfig) -> int:
    return 2 * c + attention(c, cfg) + 2 * c + feed_forward(c, cfg)


def count_parameters(cfg: ModelConfig) -> int:
    cfg.validate()
    total = conv(3, cfg.base_width, 3) + conv(cfg.base_width, 3, 3)
    for lvl in range(cfg.levels):
        c = cfg.width(lvl)
        total += cfg.blocks_per_level[lvl] * hogtb(c, cfg)
        if lvl == cfg.levels - 1:
            continue
        total += conv(4 * c, 2 * c)  # unshuffle + reduce
        total += conv(2 * c, 4 * c)  # expand + shuffle back to c
        total += conv(2 * c, c) if cfg.skip_mode == "concat" else 0
        total += conv(c, c) + conv(c, c, 3, c) + conv(2 * c, c)  # coarse skip
        total += cfg.blocks_per_level[lvl] * hogtb(c, cfg)
    return total
