"""Architecture and codec hyperparameters, with named presets.

Three scales are provided. ``toy`` is what actually trains on a desktop;
``paper-1b`` and ``paper-7b`` carry the published architecture sizes and are
constructible (useful for shape arithmetic) but far too large to train here.
``gradcheck`` is a tiny configuration for finite-difference verification.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    embed_dim: int = 512
    context_window: int = 128
    n_heads: int = 8
    n_layers: int = 4
    codebook_size: int = 64
    adaptor_hidden_dim: int = 512
    # feed-forward hidden width is ffn_mult * embed_dim (gated, so three matrices)
    ffn_mult: int = 2
    image_head_hidden_dim: int = 512

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"ModelConfig.{f.name} must be positive, got {getattr(self, f.name)}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CodecConfig:
    image_side: int = 32
    downsample_factor: int = 8
    patch_size: int = 8
    code_dim: int = 16
    und_feat_dim: int = 64
    und_layers: int = 1
    und_heads: int = 4
    vq_hidden: int = 64
    beta: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"CodecConfig.{f.name} must be positive")
        if self.image_side % self.downsample_factor:
            raise ConfigError("image_side must be divisible by downsample_factor")
        if self.image_side % self.patch_size:
            raise ConfigError("image_side must be divisible by patch_size")
        if self.und_feat_dim % self.und_heads:
            raise ConfigError("und_feat_dim must be divisible by und_heads")
        f = self.downsample_factor
        if f & (f - 1):
            raise ConfigError("downsample_factor must be a power of two")

    @property
    def gen_grid(self) -> int:
        return self.image_side // self.downsample_factor

    @property
    def und_grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def gen_tokens(self) -> int:
        return self.gen_grid ** 2

    @property
    def und_tokens(self) -> int:
        return self.und_grid ** 2

    def to_dict(self) -> dict:
        return asdict(self)


MODEL_PRESETS = {
    "toy": ModelConfig(),
    "gradcheck": ModelConfig(
        vocab_size=64, embed_dim=16, context_window=48, n_heads=2, n_layers=2,
        codebook_size=16, adaptor_hidden_dim=12, ffn_mult=2, image_head_hidden_dim=12,
    ),
    "paper-1b": ModelConfig(
        vocab_size=100_000, embed_dim=2048, context_window=4096, n_heads=16, n_layers=24,
        codebook_size=16_384, adaptor_hidden_dim=2048, image_head_hidden_dim=2048,
    ),
    "paper-7b": ModelConfig(
        vocab_size=100_000, embed_dim=4096, context_window=4096, n_heads=32, n_layers=30,
        codebook_size=16_384, adaptor_hidden_dim=4096, image_head_hidden_dim=4096,
    ),
}

CODEC_PRESETS = {
    "toy": CodecConfig(),
    "gradcheck": CodecConfig(code_dim=4, und_feat_dim=8, und_heads=2, vq_hidden=4),
    # SigLIP-L/16 at 384 gives 1024-wide features on a 24x24 grid
    "paper-1b": CodecConfig(image_side=384, downsample_factor=16, patch_size=16, code_dim=8,
                            und_feat_dim=1024, und_layers=24, und_heads=16, vq_hidden=256),
    "paper-7b": CodecConfig(image_side=384, downsample_factor=16, patch_size=16, code_dim=8,
                            und_feat_dim=1024, und_layers=24, und_heads=16, vq_hidden=256),
}


def normalize_scale(scale: str) -> str:
    key = scale.lower().replace("_", "-")
    if key not in MODEL_PRESETS:
        raise ConfigError(f"unknown scale {scale!r}; expected one of {sorted(MODEL_PRESETS)}")
    return key


def model_config(scale: str = "toy", **overrides) -> ModelConfig:
    return replace(MODEL_PRESETS[normalize_scale(scale)], **overrides)


def codec_config(scale: str = "toy", **overrides) -> CodecConfig:
    return replace(CODEC_PRESETS[normalize_scale(scale)], **overrides)
