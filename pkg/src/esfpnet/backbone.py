"""Hierarchical Mix-Transformer encoder.

Four stages of overlapping patch merging followed by pre-norm transformer
blocks with spatial-reduction attention and depthwise-conv FFNs. Parameter
names follow the reference MiT checkpoints (``patch_embed1``, ``block1.0.attn.q``,
``mlp.dwconv.dwconv`` and so on), so published pretrained weights load with an
identity name map.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigError, ShapeError
from .variants import LAYER_NORM_EPS, EncoderStageConfig


class FeaturePyramid(NamedTuple):
    """Per-stage feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution."""

    s1: torch.Tensor
    s2: torch.Tensor
    s3: torch.Tensor
    s4: torch.Tensor


def init_weights(module: nn.Module) -> None:
    """Default init: truncated normal for linear projections, fan-out normal for convs."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        fan_out = module.kernel_size[0] * module.kernel_size[1] * module.out_channels
        fan_out //= module.groups
        nn.init.normal_(module.weight, mean=0.0, std=math.sqrt(2.0 / fan_out))
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class DropPath(nn.Module):
    """Per-sample stochastic depth; identity when the rate is zero or in eval mode."""

    def __init__(self, drop_prob: float = 0.0):
        super().__init__()
        self.drop_prob = float(drop_prob)

    def forward(self, x):
        if self.drop_prob == 0.0 or not self.training:
            return x
        keep_prob = 1.0 - self.drop_prob
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = x.new_empty(shape).bernoulli_(keep_prob)
        return x * mask / keep_prob

    def extra_repr(self) -> str:
        return f"drop_prob={self.drop_prob}"


class OverlapPatchEmbed(nn.Module):
    """Strided convolution over overlapping patches, then per-token layer norm.

    Returns ``(tokens, height, width)`` with tokens shaped ``(B, H'*W', embed_dim)``
    where ``H' = H / stride`` and ``W' = W / stride``.
    """

    def __init__(self, in_chans: int, embed_dim: int, patch_size: int, stride: int):
        super().__init__()
        self.in_chans = in_chans
        self.patch_size = patch_size
        self.stride = stride
        self.proj = nn.Conv2d(
            in_chans, embed_dim, kernel_size=patch_size, stride=stride,
            padding=patch_size // 2,
        )
        self.norm = nn.LayerNorm(embed_dim, eps=LAYER_NORM_EPS)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        if x.ndim != 4:
            raise ShapeError(f"expected a rank-4 (B, C, H, W) tensor, got rank {x.ndim}")
        _, c, h, w = x.shape
        if c != self.in_chans:
            raise ShapeError(
                f"channel axis has size {c}, patch embedding expects {self.in_chans}"
            )
        if h % self.stride != 0:
            raise ShapeError(f"height {h} is not divisible by stride {self.stride}")
        if w % self.stride != 0:
            raise ShapeError(f"width {w} is not divisible by stride {self.stride}")
        x = self.proj(x)
        _, _, out_h, out_w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = self.norm(tokens)
        return tokens, out_h, out_w


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention with spatial reduction of keys and values.

    When ``sr_ratio > 1`` the key/value source is downsampled by a strided
    convolution, cutting the attention matrix from N x N to N x N/R^2.
    """

    def __init__(self, dim: int, num_heads: int, sr_ratio: int,
                 qkv_bias: bool = True, attn_drop: float = 0.0, proj_drop: float = 0.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} is not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.sr_ratio = sr_ratio

        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.kv = nn.Linear(dim, dim * 2, bias=qkv_bias)
        self.attn_drop = nn.Dropout(attn_drop)
        self.proj = nn.Linear(dim, dim)
        self.proj_drop = nn.Dropout(proj_drop)
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)

    def forward(self, x: torch.Tensor, height: int, width: int,
                return_weights: bool = False):
        b, n, c = x.shape
        if n != height * width:
            raise ShapeError(f"token axis has {n} entries, expected {height}*{width}")
        if height % self.sr_ratio != 0:
            raise ShapeError(
                f"height {height} is not divisible by sr_ratio {self.sr_ratio}"
            )
        if width % self.sr_ratio != 0:
            raise ShapeError(
                f"width {width} is not divisible by sr_ratio {self.sr_ratio}"
            )

        q = self.q(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

        source = x
        if self.sr_ratio > 1:
            grid = x.transpose(1, 2).reshape(b, c, height, width)
            source = self.sr(grid).reshape(b, c, -1).transpose(1, 2)
            source = self.norm(source)
        kv = self.kv(source).reshape(b, -1, 2, self.num_heads, self.head_dim)
        kv = kv.permute(2, 0, 3, 1, 4)
        k, v = kv.unbind(0)

        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        weights = attn
        attn = self.attn_drop(attn)

        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj_drop(self.proj(out))
        if return_weights:
            return out, weights
        return out


class DWConv(nn.Module):
    """3x3 depthwise convolution applied to tokens reshaped onto their grid."""

    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 3, stride=1, padding=1, groups=dim)

    def forward(self, x: torch.Tensor, height: int, width: int) -> torch.Tensor:
        b, n, c = x.shape
        x = x.transpose(1, 2).reshape(b, c, height, width)
        x = self.dwconv(x)
        return x.flatten(2).transpose(1, 2)


class MixFFN(nn.Module):
    """Feed-forward block with a depthwise conv between the two projections."""

    def __init__(self, dim: int, mlp_ratio: int, drop: float = 0.0):
        super().__init__()
        hidden = dim * mlp_ratio
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = DWConv(hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(drop)

    def forward(self, x: torch.Tensor, height: int, width: int) -> torch.Tensor:
        x = self.fc1(x)
        x = self.dwconv(x, height, width)
        x = self.act(x)
        x = self.drop(x)
        x = self.fc2(x)
        return self.drop(x)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: attention sublayer then Mix-FFN sublayer."""

    def __init__(self, dim: int, num_heads: int, sr_ratio: int, mlp_ratio: int,
                 qkv_bias: bool = True, drop: float = 0.0, attn_drop: float = 0.0,
                 drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.attn = EfficientSelfAttention(
            dim, num_heads, sr_ratio, qkv_bias=qkv_bias,
            attn_drop=attn_drop, proj_drop=drop,
        )
        self.norm2 = nn.LayerNorm(dim, eps=LAYER_NORM_EPS)
        self.mlp = MixFFN(dim, mlp_ratio, drop=drop)
        self.drop_path = DropPath(drop_path)

    def forward(self, x: torch.Tensor, height: int, width: int) -> torch.Tensor:
        x = x + self.drop_path(self.attn(self.norm1(x), height, width))
        x = x + self.drop_path(self.mlp(self.norm2(x), height, width))
        return x


class MixTransformer(nn.Module):
    """Stack of patch-merging stages producing a feature pyramid."""

    def __init__(self, stages: tuple[EncoderStageConfig, ...], in_chans: int = 3,
                 qkv_bias: bool = True, drop_rate: float = 0.0,
                 attn_drop_rate: float = 0.0, drop_path_rate: float = 0.0):
        super().__init__()
        if not stages:
            raise ConfigError("encoder needs at least one stage")
        self.stage_configs = tuple(stages)
        self.in_chans = in_chans

        total_depth = sum(cfg.depth for cfg in stages)
        dpr = torch.linspace(0, drop_path_rate, total_depth).tolist()
        cursor = 0
        prev_dim = in_chans
        for i, cfg in enumerate(stages, start=1):
            setattr(self, f"patch_embed{i}", OverlapPatchEmbed(
                prev_dim, cfg.embed_dim, cfg.patch_size, cfg.stride))
            blocks = nn.ModuleList(
                TransformerBlock(
                    cfg.embed_dim, cfg.num_heads, cfg.sr_ratio, cfg.mlp_ratio,
                    qkv_bias=qkv_bias, drop=drop_rate, attn_drop=attn_drop_rate,
                    drop_path=dpr[cursor + j],
                )
                for j in range(cfg.depth)
            )
            setattr(self, f"block{i}", blocks)
            setattr(self, f"norm{i}", nn.LayerNorm(cfg.embed_dim, eps=LAYER_NORM_EPS))
            cursor += cfg.depth
            prev_dim = cfg.embed_dim

        self.apply(init_weights)

    @property
    def total_stride(self) -> int:
        out = 1
        for cfg in self.stage_configs:
            out *= cfg.stride
        return out

    @property
    def out_channels(self) -> tuple[int, ...]:
        return tuple(cfg.embed_dim for cfg in self.stage_configs)

    def forward(self, x: torch.Tensor):
        if x.ndim != 4:
            raise ShapeError(f"expected a rank-4 (B, C, H, W) tensor, got rank {x.ndim}")
        _, c, h, w = x.shape
        if c != self.in_chans:
            raise ShapeError(f"channel axis has size {c}, encoder expects {self.in_chans}")
        stride = self.total_stride
        if h % stride != 0 or w % stride != 0:
            raise ShapeError(
                f"spatial dims ({h}, {w}) must be divisible by {stride}; "
                "resize the input before encoding"
            )

        features = []
        batch = x.shape[0]
        for i in range(1, len(self.stage_configs) + 1):
            tokens, grid_h, grid_w = getattr(self, f"patch_embed{i}")(x)
            for block in getattr(self, f"block{i}"):
                tokens = block(tokens, grid_h, grid_w)
            tokens = getattr(self, f"norm{i}")(tokens)
            x = tokens.transpose(1, 2).reshape(batch, -1, grid_h, grid_w)
            features.append(x)
        if len(features) == 4:
            return FeaturePyramid(*features)
        return tuple(features)


@dataclass
class LoadManifest:
    """Outcome of loading pretrained encoder weights."""

    loaded: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)

    def summary(self) -> str:
        return (
            f"loaded {len(self.loaded)} tensors, "
            f"{len(self.missing)} missing, {len(self.unexpected)} unexpected"
        )


_WRAPPER_PREFIXES = ("module.", "backbone.", "encoder.")


def _normalize_state_dict(obj) -> dict[str, torch.Tensor]:
    if isinstance(obj, dict) and "state_dict" in obj and isinstance(obj["state_dict"], dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise CheckpointError("archive does not contain a state dict")
    out = {}
    for name, tensor in obj.items():
        for prefix in _WRAPPER_PREFIXES:
            if name.startswith(prefix):
                name = name[len(prefix):]
        out[name] = tensor
    return out


def load_pretrained(encoder: MixTransformer, archive, strict: bool = False) -> LoadManifest:
    """Copy pretrained tensors into ``encoder`` and report what happened.

    ``archive`` is a file path or an in-memory state dict. Tensors whose names
    match but whose shapes differ raise a ShapeError naming the tensor; names
    absent from the archive are listed in the manifest (an error under
    ``strict``), and archive-only names are listed as unexpected.
    """
    if isinstance(archive, (str, bytes)) or hasattr(archive, "__fspath__"):
        try:
            obj = torch.load(archive, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"could not read weight archive {archive}: {exc}") from exc
    else:
        obj = archive
    state = _normalize_state_dict(obj)

    own = encoder.state_dict()
    manifest = LoadManifest()
    to_copy = {}
    for name, target in own.items():
        if name not in state:
            manifest.missing.append(name)
            continue
        source = state[name]
        if tuple(source.shape) != tuple(target.shape):
            raise ShapeError(
                f"pretrained tensor {name!r} has shape {tuple(source.shape)}, "
                f"encoder expects {tuple(target.shape)}"
            )
        to_copy[name] = source
        manifest.loaded.append(name)
    manifest.unexpected = sorted(set(state) - set(own))

    if strict and manifest.missing:
        raise CheckpointError(
            "archive is missing tensors required in strict mode: "
            + ", ".join(manifest.missing[:8])
            + ("..." if len(manifest.missing) > 8 else "")
        )

    with torch.no_grad():
        for name, source in to_copy.items():
            own[name].copy_(source)
    return manifest

