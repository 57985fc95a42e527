"""Efficient stage-wise feature pyramid decoder.

Every pyramid level is first projected to a shared width D by a 1x1 linear
prediction. Fusion then walks from the deepest level toward the shallowest:
the running global map is upsampled x2, concatenated with the next shallower
prediction, and projected back to D. The head concatenates the stage-1
prediction with the three fused maps (all at 1/4 resolution), projects to one
logit channel, and upsamples x4 to the input resolution. There is no
normalization or nonlinearity anywhere in the decoder; it is a composition of
linear maps and bilinear interpolation.

Dataflow for inputs at resolution S (spatial scales in parentheses)::

    p4 (1/32) --up2--+
    p3 (1/16) -------cat--fuse3--> f16 (1/16) --up2--+
    p2 (1/8)  ----------------------------------------cat--fuse2--> f8 (1/8) --up2--+
    p1 (1/4)  --------------------------------------------------------------------cat--fuse1--> f4 (1/4)

    head( cat[ p1, f4, up2(f8), up4(f16) ] ) --up4--> logits (S)
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import init_weights
from .errors import ShapeError
from .variants import DecoderConfig


def _upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


class ESFPDecoder(nn.Module):
    """Maps a four-level feature pyramid to one logit channel at input resolution."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.predict_dim
        self.predict = nn.ModuleList(
            nn.Conv2d(c, d, kernel_size=1) for c in cfg.per_stage_dims
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(2 * d, d, kernel_size=1) for _ in range(len(cfg.per_stage_dims) - 1)
        )
        self.head = nn.Conv2d(len(cfg.per_stage_dims) * d, 1, kernel_size=1)
        self.apply(init_weights)

    def stage_linear_predict(self, feature: torch.Tensor, stage_index: int) -> torch.Tensor:
        """Project one stage's features to the shared prediction width."""
        if not 0 <= stage_index < len(self.predict):
            raise ShapeError(f"stage_index {stage_index} out of range [0, {len(self.predict)})")
        expected = self.cfg.per_stage_dims[stage_index]
        if feature.ndim != 4:
            raise ShapeError(f"expected a rank-4 feature map, got rank {feature.ndim}")
        if feature.shape[1] != expected:
            raise ShapeError(
                f"stage {stage_index + 1} feature has {feature.shape[1]} channels, "
                f"expected {expected}"
            )
        return self.predict[stage_index](feature)

    def fuse_global_to_local(self, predicted: list[torch.Tensor]) -> list[torch.Tensor]:
        """Fuse deepest-to-shallowest; returns maps at 1/16, 1/8 and 1/4 scale."""
        if len(predicted) != len(self.predict):
            raise ShapeError(
                f"expected {len(self.predict)} predicted maps, got {len(predicted)}"
            )
        d = self.cfg.predict_dim
        for i, p in enumerate(predicted):
            if p.shape[1] != d:
                raise ShapeError(
                    f"predicted map {i + 1} has {p.shape[1]} channels, expected {d}"
                )
        for shallow, deep in zip(predicted, predicted[1:]):
            if shallow.shape[-2:] != tuple(2 * s for s in deep.shape[-2:]):
                raise ShapeError(
                    f"pyramid scales do not halve: {tuple(shallow.shape[-2:])} "
                    f"followed by {tuple(deep.shape[-2:])}"
                )

        fused = []
        running = predicted[-1]
        for conv, shallow in zip(self.fuse, reversed(predicted[:-1])):
            running = conv(torch.cat([shallow, _upsample(running, 2)], dim=1))
            fused.append(running)
        return fused

    def aggregate_and_head(self, stage1_pred: torch.Tensor,
                           fused: list[torch.Tensor]) -> torch.Tensor:
        """Concatenate all cues at 1/4 scale, project to one channel, upsample x4."""
        if len(fused) != len(self.fuse):
            raise ShapeError(f"expected {len(self.fuse)} fused maps, got {len(fused)}")
        f16, f8, f4 = fused
        maps = [stage1_pred, f4, _upsample(f8, 2), _upsample(f16, 4)]
        target = maps[0].shape[-2:]
        for i, m in enumerate(maps):
            if m.shape[-2:] != target:
                raise ShapeError(
                    f"aggregate input {i} has spatial size {tuple(m.shape[-2:])}, "
                    f"expected {tuple(target)}"
                )
        logits = self.head(torch.cat(maps, dim=1))
        return _upsample(logits, self.cfg.output_scale)

    def forward(self, pyramid) -> torch.Tensor:
        features = list(pyramid)
        if len(features) != len(self.predict):
            raise ShapeError(
                f"expected a {len(self.predict)}-level pyramid, got {len(features)} levels"
            )
        predicted = [
            self.stage_linear_predict(feature, i) for i, feature in enumerate(features)
        ]
        fused = self.fuse_global_to_local(predicted)
        return self.aggregate_and_head(predicted[0], fused)
