"""Analytic parameter and FLOP accounting.

Counts are derived from the variant description, not from tracing, so they
are exact integers and independent of the runtime. Convention: one
multiply-accumulate = one FLOP. Counted work: convolutions, linear maps, and
the two attention matrix products (QK^T and AV). Excluded and documented:
normalization, activations, softmax, bias and residual additions, and
bilinear upsampling. The analytic parameter tally must equal the framework's
tensor-size sum exactly; a mismatch means the accounting walk and the built
network disagree.
"""

from dataclasses import dataclass, field

from .errors import ConfigError, ShapeError
from .variants import VariantSpec

FLOP_CONVENTION = (
    "1 MAC = 1 FLOP; convolutions, linear maps and attention QK^T/AV products "
    "are counted; normalization, activations, softmax, bias/residual adds and "
    "bilinear upsampling are excluded"
)


@dataclass(frozen=True)
class ModuleStat:
    """Parameter and FLOP tally for one named submodule."""

    name: str
    params: int
    flops: int


@dataclass
class ComplexityReport:
    """Totals plus a per-module breakdown that sums exactly to them."""

    variant_id: str
    input_shape: tuple[int, int, int, int]
    param_count: int
    flops: int
    per_module: list[ModuleStat] = field(default_factory=list)
    convention: str = FLOP_CONVENTION

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def params_million(self) -> float:
        return self.param_count / 1e6

    def module_total(self, prefix: str) -> ModuleStat:
        """Sum of all breakdown rows whose name starts with ``prefix``."""
        params = sum(m.params for m in self.per_module if m.name.startswith(prefix))
        flops = sum(m.flops for m in self.per_module if m.name.startswith(prefix))
        return ModuleStat(prefix, params, flops)

    def to_lines(self) -> list[str]:
        """Machine-readable, tab-delimited serialization."""
        lines = [
            f"variant\t{self.variant_id}",
            "input_shape\t" + "x".join(str(s) for s in self.input_shape),
            f"param_count\t{self.param_count}",
            f"flops\t{self.flops}",
            f"gflops\t{self.gflops:.4f}",
            f"convention\t{self.convention}",
        ]
        lines.extend(
            f"module\t{m.name}\t{m.params}\t{m.flops}" for m in self.per_module
        )
        return lines

    def format_table(self, top: int | None = None) -> str:
        rows = self.per_module
        if top is not None:
            rows = sorted(rows, key=lambda m: m.flops, reverse=True)[:top]
        width = max((len(m.name) for m in rows), default=10)
        out = [
            f"variant {self.variant_id}  input {self.input_shape}",
            f"parameters {self.param_count:,} ({self.params_million:.2f} M)",
            f"flops {self.flops:,} ({self.gflops:.2f} G)",
            "",
            f"{'module'.ljust(width)}  {'params':>12}  {'flops':>16}",
        ]
        out.extend(
            f"{m.name.ljust(width)}  {m.params:>12,}  {m.flops:>16,}" for m in rows
        )
        return "\n".join(out)


def count_parameters(model) -> int:
    """Trainable parameter count straight from the framework's tensors."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _attention_stats(dim: int, num_heads: int, sr_ratio: int,
                     grid_h: int, grid_w: int) -> tuple[int, int]:
    del num_heads  # per-head split does not change MAC totals
    n = grid_h * grid_w
    params = (dim * dim + dim)          # q
    params += (2 * dim * dim + 2 * dim)  # kv
    params += (dim * dim + dim)          # proj
    if sr_ratio > 1:
        params += dim * dim * sr_ratio ** 2 + dim  # sr conv
        params += 2 * dim                          # sr norm

    n_kv = n
    flops = n * dim * dim  # q
    if sr_ratio > 1:
        n_kv = (grid_h // sr_ratio) * (grid_w // sr_ratio)
        flops += n_kv * dim * dim * sr_ratio ** 2  # sr conv
    flops += n_kv * dim * 2 * dim  # kv
    flops += 2 * n * n_kv * dim    # QK^T and AV
    flops += n * dim * dim         # proj
    return params, flops


def _ffn_stats(dim: int, mlp_ratio: int, grid_h: int, grid_w: int) -> tuple[int, int]:
    n = grid_h * grid_w
    hidden = dim * mlp_ratio
    params = dim * hidden + hidden      # fc1
    params += 9 * hidden + hidden       # 3x3 depthwise conv
    params += hidden * dim + dim        # fc2
    flops = n * dim * hidden
    flops += n * hidden * 9
    flops += n * hidden * dim
    return params, flops


def variant_complexity(variant: VariantSpec,
                       input_shape: tuple[int, int, int, int] = (1, 3, 352, 352),
                       ) -> ComplexityReport:
    """Walk the variant description and tally parameters and FLOPs."""
    if len(input_shape) != 4:
        raise ShapeError(f"input_shape must be (B, C, H, W), got {input_shape}")
    batch, in_chans, h, w = input_shape
    if batch < 1:
        raise ShapeError(f"batch axis must be >= 1, got {batch}")
    stride = variant.total_stride
    if h % stride != 0 or w % stride != 0:
        raise ShapeError(
            f"spatial dims ({h}, {w}) must be divisible by {stride}; "
            "resize the input before counting"
        )

    rows: list[ModuleStat] = []
    grids: list[tuple[int, int]] = []
    prev_dim = in_chans
    gh, gw = h, w
    for i, cfg in enumerate(variant.stages, start=1):
        gh, gw = gh // cfg.stride, gw // cfg.stride
        grids.append((gh, gw))
        n = gh * gw
        k = cfg.patch_size
        embed_params = k * k * prev_dim * cfg.embed_dim + cfg.embed_dim  # conv
        embed_params += 2 * cfg.embed_dim                                # layer norm
        embed_flops = k * k * prev_dim * cfg.embed_dim * n
        rows.append(ModuleStat(f"encoder.patch_embed{i}", embed_params, embed_flops))

        for j in range(cfg.depth):
            attn_p, attn_f = _attention_stats(
                cfg.embed_dim, cfg.num_heads, cfg.sr_ratio, gh, gw)
            ffn_p, ffn_f = _ffn_stats(cfg.embed_dim, cfg.mlp_ratio, gh, gw)
            norms_p = 4 * cfg.embed_dim  # norm1 + norm2
            rows.append(ModuleStat(
                f"encoder.block{i}.{j}", attn_p + ffn_p + norms_p, attn_f + ffn_f))
        rows.append(ModuleStat(f"encoder.norm{i}", 2 * cfg.embed_dim, 0))
        prev_dim = cfg.embed_dim

    dec = variant.decoder
    d = dec.predict_dim
    for i, (dim, (sh, sw)) in enumerate(zip(dec.per_stage_dims, grids), start=1):
        rows.append(ModuleStat(
            f"decoder.predict{i}", dim * d + d, dim * d * sh * sw))
    # Fusion convs run at the spatial size of the shallower input:
    # fuse1 at the 1/16 grid, fuse2 at 1/8, fuse3 at 1/4.
    for i, (sh, sw) in enumerate(reversed(grids[:-1]), start=1):
        rows.append(ModuleStat(
            f"decoder.fuse{i}", 2 * d * d + d, 2 * d * d * sh * sw))
    head_h, head_w = grids[0]
    rows.append(ModuleStat(
        "decoder.head", 4 * d * 1 + 1, 4 * d * 1 * head_h * head_w))

    params = sum(m.params for m in rows)
    flops = batch * sum(m.flops for m in rows)
    if batch != 1:
        rows = [ModuleStat(m.name, m.params, batch * m.flops) for m in rows]
    return ComplexityReport(
        variant_id=variant.id,
        input_shape=tuple(input_shape),
        param_count=params,
        flops=flops,
        per_module=rows,
    )


def count_flops(model, input_shape: tuple[int, int, int, int] = (1, 3, 352, 352),
                ) -> ComplexityReport:
    """Analytic complexity of a built model at the given input shape."""
    variant = getattr(model, "variant", None)
    if variant is None:
        raise ConfigError(
            f"cannot count FLOPs for unsupported module type {type(model).__name__}; "
            "analytic accounting needs a model built from a VariantSpec"
        )
    return variant_complexity(variant, input_shape)
