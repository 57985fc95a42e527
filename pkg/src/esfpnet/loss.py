"""Boundary-weighted IoU + BCE segmentation objective.

Each pixel is weighted by 1 + gain * |local_mean(gt) - gt|, where the local
mean is taken over a kernel_size x kernel_size window clipped at the image
border (padding never dilutes the average). The weight map therefore equals 1
on homogeneous regions and rises toward label boundaries. Both terms are
normalized per image and then averaged over the batch; the total is their
exact sum.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError

WEIGHT_KERNEL_SIZE = 31
WEIGHT_GAIN = 5.0


@dataclass(frozen=True)
class LossTerms:
    """The two loss components and their sum, all differentiable scalars."""

    iou: torch.Tensor
    bce: torch.Tensor
    total: torch.Tensor


def _as_nchw(x: torch.Tensor, name: str) -> torch.Tensor:
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise ShapeError(
                f"{name} must have a single channel, got {x.shape[1]} channels"
            )
        return x
    raise ShapeError(f"{name} must have 2, 3 or 4 dims, got rank {x.ndim}")


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains NaN or Inf values")


def _check_binary(gt: torch.Tensor) -> None:
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary (every value 0 or 1)")


def pixel_weight_map(gt: torch.Tensor, kernel_size: int = WEIGHT_KERNEL_SIZE,
                     gain: float = WEIGHT_GAIN) -> torch.Tensor:
    """Per-pixel weights emphasizing pixels that disagree with their neighbourhood."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd number, got {kernel_size}")
    gt = _as_nchw(gt, "gt")
    _check_finite(gt, "gt")
    _check_binary(gt)
    gt = gt.float() if not gt.dtype.is_floating_point else gt
    # count_include_pad=False divides each window by the number of in-bounds
    # pixels, so an all-one map pools to exactly 1 everywhere.
    local_mean = F.avg_pool2d(
        gt, kernel_size, stride=1, padding=kernel_size // 2, count_include_pad=False,
    )
    return 1.0 + gain * (local_mean - gt).abs()


def _align(logits: torch.Tensor, gt: torch.Tensor,
           weights: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    logits = _as_nchw(logits, "logits")
    gt = _as_nchw(gt, "gt")
    if logits.shape != gt.shape:
        raise ShapeError(
            f"logits shape {tuple(logits.shape)} does not match gt shape {tuple(gt.shape)}"
        )
    _check_finite(logits, "logits")
    _check_finite(gt, "gt")
    _check_binary(gt)
    if weights is None:
        weights = pixel_weight_map(gt)
    else:
        weights = _as_nchw(weights, "weights")
        if weights.shape != gt.shape:
            raise ShapeError(
                f"weights shape {tuple(weights.shape)} does not match gt shape "
                f"{tuple(gt.shape)}"
            )
        _check_finite(weights, "weights")
    gt = gt.to(logits.dtype)
    weights = weights.to(logits.dtype)
    return logits, gt, weights


def weighted_bce(logits: torch.Tensor, gt: torch.Tensor,
                 weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted binary cross-entropy on logits, normalized by the weight mass."""
    logits, gt, weights = _align(logits, gt, weights)
    # binary_cross_entropy_with_logits uses the log-sum-exp form, so saturated
    # logits never produce log(0).
    per_pixel = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    per_image = (weights * per_pixel).sum(dim=(1, 2, 3)) / weights.sum(dim=(1, 2, 3))
    return per_image.mean()


def weighted_iou(logits: torch.Tensor, gt: torch.Tensor,
                 weights: torch.Tensor | None = None,
                 smooth: float = 1.0) -> torch.Tensor:
    """Weighted soft-IoU loss; the smoothing constant keeps empty frames finite."""
    logits, gt, weights = _align(logits, gt, weights)
    prob = torch.sigmoid(logits)
    inter = (weights * prob * gt).sum(dim=(1, 2, 3))
    union = (weights * (prob + gt - prob * gt)).sum(dim=(1, 2, 3))
    per_image = 1.0 - (inter + smooth) / (union + smooth)
    return per_image.mean()


def total_loss(logits: torch.Tensor, gt: torch.Tensor,
               kernel_size: int = WEIGHT_KERNEL_SIZE,
               gain: float = WEIGHT_GAIN) -> LossTerms:
    """Weighted IoU plus weighted BCE with a shared weight map."""
    logits4 = _as_nchw(logits, "logits")
    gt4 = _as_nchw(gt, "gt")
    weights = pixel_weight_map(gt4, kernel_size=kernel_size, gain=gain)
    iou = weighted_iou(logits4, gt4, weights)
    bce = weighted_bce(logits4, gt4, weights)
    return LossTerms(iou=iou, bce=bce, total=iou + bce)
