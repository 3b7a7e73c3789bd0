"""Model configuration and presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

from .tensor import ConfigurationError


@dataclass
class ModelConfig:
    base_width: int = 16
    levels: int = 4
    blocks_per_level: tuple = (1, 1, 1, 1)
    heads_per_level: tuple = (1, 2, 2, 4)
    n_bin: int = 9
    ldr_patch: int = 8
    ffn_expansion: int = 2
    # component switches (ablation rows)
    ldrconv: bool = True
    dhogsa: bool = True
    diff: bool = True
    hog_loss: bool = True
    # branch switches for the histogram-reshape ablation
    bhogr: bool = True
    fhogr: bool = True
    # fidelity switches
    sqrt_heads_scaling: bool = False
    ldr_no_unsort: bool = False
    skip_mode: str = "concat"

    def __post_init__(self):
        self.blocks_per_level = tuple(int(b) for b in self.blocks_per_level)
        self.heads_per_level = tuple(int(h) for h in self.heads_per_level)

    def problems(self) -> list[str]:
        out = []
        if self.levels < 1:
            out.append(f"levels must be >= 1, got {self.levels}")
        if len(self.blocks_per_level) != self.levels:
            out.append(f"blocks_per_level has {len(self.blocks_per_level)} entries, expected {self.levels}")
        if len(self.heads_per_level) != self.levels:
            out.append(f"heads_per_level has {len(self.heads_per_level)} entries, expected {self.levels}")
        if self.base_width < 2 or self.base_width % 2:
            out.append(f"base_width must be even and >= 2, got {self.base_width}")
        for lvl, heads in enumerate(self.heads_per_level):
            width = self.width(lvl)
            if heads < 1 or width % heads:
                out.append(f"level {lvl}: width {width} not divisible by heads {heads}")
        if any(b < 0 for b in self.blocks_per_level):
            out.append("blocks_per_level entries must be >= 0")
        if self.n_bin < 1:
            out.append(f"n_bin must be >= 1, got {self.n_bin}")
        if self.ldr_patch < 1:
            out.append(f"ldr_patch must be >= 1, got {self.ldr_patch}")
        if self.ffn_expansion < 1:
            out.append(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        if self.dhogsa and not (self.bhogr or self.fhogr):
            out.append("at least one of bhogr/fhogr must be enabled")
        if self.skip_mode not in ("concat", "add"):
            out.append(f"skip_mode must be 'concat' or 'add', got {self.skip_mode!r}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))
        return self

    def width(self, level: int) -> int:
        return self.base_width * 2**level

    def pad_multiple(self) -> int:
        """Spatial multiple that keeps every level aligned for resampling and
        for the histogram reshapes (H*W at level l divisible by its bins)."""
        m = math.lcm(2 ** (self.levels - 1), self.ldr_patch)
        while not all(
            ((m // 2**lvl) ** 2) % heads == 0 for lvl, heads in enumerate(self.heads_per_level)
        ):
            m *= 2
        return m

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_level"] = list(self.blocks_per_level)
        d["heads_per_level"] = list(self.heads_per_level)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# The small/large presets approximate the reported parameter budgets
# (about 2.9M and 16.6M); their exact layouts are not published.
PRESETS = {
    "tiny": dict(base_width=16, blocks_per_level=(1, 1, 1, 1), heads_per_level=(1, 2, 2, 4)),
    "small": dict(base_width=28, blocks_per_level=(1, 2, 2, 2), heads_per_level=(1, 2, 4, 8)),  # ~2.97M
    "large": dict(base_width=48, blocks_per_level=(4, 4, 4, 4), heads_per_level=(1, 2, 4, 8)),  # ~16.2M
}

# component ablation rows, all off to all on: (ldrconv, dhogsa, diff, hog_loss)
ABLATION_ROWS = [
    (False, False, False, False),
    (True, False, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, True, True),
]


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides}).validate()


def ablation_config(row: int, base: ModelConfig | None = None) -> ModelConfig:
    ldr, attn, diff, hogl = ABLATION_ROWS[row]
    base = base or preset("tiny")
    d = base.to_dict()
    d.update(ldrconv=ldr, dhogsa=attn, diff=diff, hog_loss=hogl)
    return ModelConfig.from_dict(d).validate()
