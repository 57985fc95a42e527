"""Model variant registry.

Every architectural hyperparameter is a pure function of the variant id, so
two processes that agree on the id agree on the network down to tensor shapes.
"""

from dataclasses import dataclass

from .errors import ConfigError

LAYER_NORM_EPS = 1e-6

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_INPUT_SIZE = 352


@dataclass(frozen=True)
class EncoderStageConfig:
    """Hyperparameters of one encoder stage."""

    embed_dim: int
    depth: int
    num_heads: int
    sr_ratio: int
    mlp_ratio: int
    patch_size: int
    stride: int

    def __post_init__(self):
        if self.embed_dim <= 0 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be a positive multiple of "
                f"num_heads {self.num_heads}"
            )
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.sr_ratio < 1:
            raise ConfigError(f"sr_ratio must be >= 1, got {self.sr_ratio}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.stride not in (2, 4):
            raise ConfigError(f"stride must be 2 or 4, got {self.stride}")
        if self.patch_size <= self.stride:
            raise ConfigError(
                f"patch_size {self.patch_size} must exceed stride {self.stride} "
                "so neighbouring patches overlap"
            )


@dataclass(frozen=True)
class DecoderConfig:
    """Channel plan of the stage-wise feature pyramid decoder."""

    per_stage_dims: tuple[int, int, int, int]
    predict_dim: int
    output_scale: int = 4

    def __post_init__(self):
        if len(self.per_stage_dims) != 4:
            raise ConfigError("decoder expects exactly four pyramid channel counts")
        if self.predict_dim <= 0:
            raise ConfigError(f"predict_dim must be positive, got {self.predict_dim}")
        if self.output_scale < 1:
            raise ConfigError(f"output_scale must be >= 1, got {self.output_scale}")


@dataclass(frozen=True)
class VariantSpec:
    """Complete architectural description of one model size."""

    id: str
    stages: tuple[EncoderStageConfig, ...]
    decoder: DecoderConfig
    input_mean: tuple[float, float, float] = IMAGENET_MEAN
    input_std: tuple[float, float, float] = IMAGENET_STD

    @property
    def total_stride(self) -> int:
        out = 1
        for cfg in self.stages:
            out *= cfg.stride
        return out


# Stage-wise widths and depths per variant; heads, reduction ratios and the
# patch-merging geometry are shared across sizes.
_WIDTHS = {
    "B0": (32, 64, 160, 256),
    "B2": (64, 128, 320, 512),
    "B4": (64, 128, 320, 512),
}
_DEPTHS = {
    "B0": (2, 2, 2, 2),
    "B2": (3, 4, 6, 3),
    "B4": (3, 8, 27, 3),
}
_HEADS = (1, 2, 5, 8)
_SR_RATIOS = (8, 4, 2, 1)
_MLP_RATIO = 4
_PATCH_SIZES = (7, 3, 3, 3)
_STRIDES = (4, 2, 2, 2)

VARIANT_IDS = tuple(sorted(_WIDTHS))


def get_variant(variant_id: str) -> VariantSpec:
    """Build the spec for ``variant_id`` ("B0", "B2" or "B4")."""
    key = str(variant_id).upper()
    if key not in _WIDTHS:
        raise ConfigError(
            f"unknown variant {variant_id!r}; expected one of {', '.join(VARIANT_IDS)}"
        )
    widths = _WIDTHS[key]
    depths = _DEPTHS[key]
    stages = tuple(
        EncoderStageConfig(
            embed_dim=widths[i],
            depth=depths[i],
            num_heads=_HEADS[i],
            sr_ratio=_SR_RATIOS[i],
            mlp_ratio=_MLP_RATIO,
            patch_size=_PATCH_SIZES[i],
            stride=_STRIDES[i],
        )
        for i in range(4)
    )
    # The shared prediction width is the stage-1 embedding width, which keeps
    # the decoder a small fraction of total capacity at every size.
    decoder = DecoderConfig(per_stage_dims=widths, predict_dim=widths[0])
    return VariantSpec(id=key, stages=stages, decoder=decoder)
