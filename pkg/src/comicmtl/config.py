"""Architecture configuration and its two presets."""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, replace


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    embed_dim: int = 32
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_heads: tuple[int, ...] = (2, 4, 8, 16)
    window_size: int = 4
    num_classes: int = 4
    decoder_depths: tuple[int, ...] = (2, 2, 2, 2)
    # defaults to the encoder heads reversed
    decoder_heads: tuple[int, ...] | None = None
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True
    dta_enabled: bool = False
    dta_stage: int = 3
    disc_hidden: int = 64
    in_channels: int = 3
    # "fan_in": linear weights ~ trunc normal with std 1/sqrt(d_in); "fixed": std 0.02
    init: str = "fan_in"
    seed: int = 0

    def __post_init__(self):
        for name in ("stage_depths", "stage_heads", "decoder_depths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.decoder_heads is None:
            object.__setattr__(self, "decoder_heads", tuple(reversed(self.stage_heads)))
        else:
            object.__setattr__(self, "decoder_heads", tuple(self.decoder_heads))
        self.validate()

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(
            patch_size=4,
            embed_dim=192,
            stage_depths=(2, 2, 18, 2),
            stage_heads=(6, 12, 24, 48),
            window_size=7,
            num_classes=4,
            decoder_depths=(2, 2, 2, 2),
            init="fixed",
        )
        base.update(overrides)
        return cls(**base)

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    def stage_channels(self, stage: int) -> int:
        """Channel width of 1-based encoder ``stage``."""
        return self.embed_dim * 2 ** (stage - 1)

    def validate(self) -> None:
        if len(self.stage_depths) != 4 or len(self.stage_heads) != 4:
            raise ConfigError("exactly four encoder stages are required")
        if len(self.decoder_depths) != 4 or len(self.decoder_heads) != 4:
            raise ConfigError("exactly four decoder stages are required")
        if self.patch_size < 1 or self.window_size < 1 or self.embed_dim < 1:
            raise ConfigError("patch_size, window_size and embed_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for s, heads in enumerate(self.stage_heads, start=1):
            if heads < 1 or self.stage_channels(s) % heads:
                raise ConfigError(
                    f"stage {s}: {heads} heads do not divide {self.stage_channels(s)} channels")
        for i, heads in enumerate(self.decoder_heads):
            ch = self.stage_channels(4 - i)
            if heads < 1 or ch % heads:
                raise ConfigError(f"decoder stage {i + 1}: {heads} heads do not divide {ch}")
        if self.init not in ("fan_in", "fixed"):
            raise ConfigError(f"init must be 'fan_in' or 'fixed', got {self.init!r}")
        if not 1 <= self.dta_stage <= 4:
            raise ConfigError(f"dta_stage must be in 1..4, got {self.dta_stage}")

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def pyramid_shapes(cfg: ModelConfig, height: int, width: int) -> list[tuple[int, int, int]]:
    """(h, w, channels) of each encoder stage output for a padded input."""
    h, w = height // cfg.patch_size, width // cfg.patch_size
    shapes = []
    for s in range(1, 5):
        shapes.append((h, w, cfg.stage_channels(s)))
        h, w = h // 2, w // 2
    return shapes



def parse_value(text: str):
    """Python-literal parse of a config value; bare words stay strings."""
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
