"""Segmentation metric battery.

Conventions, shared by every consumer in the package:

* probability maps are float arrays in [0, 1]; ground truth is binary
* dice/iou binarize probabilities at 0.5; a frame with both prediction and
  ground truth empty scores 1.0 on both
* MAE is computed on raw probabilities
* the structure measure and the enhanced-alignment measure follow the widely
  used MATLAB evaluation tool, including its degenerate branches, sample
  standard deviation, 1-based rounded centroid and (N - 1) normalization;
  results are clipped to [0, 1]
* E_phi^max takes the maximum over 256 uniformly spaced thresholds
* aggregate values are plain means of per-image values
"""

import math
from dataclasses import dataclass, field

import numpy as np

# Machine epsilon of IEEE doubles, matching the reference tool's `eps`.
EPS = float(np.finfo(np.float64).eps)

E_MEASURE_THRESHOLDS = np.linspace(0.0, 1.0, 256)

LESION = "lesion"
NORMAL = "normal"


def _as_binary(arr, name: str) -> np.ndarray:
    out = np.asarray(arr)
    if out.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got {out.ndim} dims")
    if out.dtype != bool:
        values = np.unique(out)
        if not np.isin(values, (0, 1)).all():
            raise ValueError(f"{name} must be binary, found values {values[:8]}")
        out = out.astype(bool)
    return out


def _as_prob(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got {out.ndim} dims")
    if not np.isfinite(out).all():
        raise ValueError(f"{name} contains NaN or Inf values")
    if out.min() < 0.0 or out.max() > 1.0:
        raise ValueError(f"{name} must lie in [0, 1], found range "
                         f"[{out.min():.4g}, {out.max():.4g}]")
    return out


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice(pred_mask, gt_mask) -> float:
    """Dice overlap of two binary masks; both empty scores 1.0."""
    pred = _as_binary(pred_mask, "pred_mask")
    gt = _as_binary(gt_mask, "gt_mask")
    _check_same_shape(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    inter = int((pred & gt).sum())
    return 2.0 * inter / denom


def iou(pred_mask, gt_mask) -> float:
    """Intersection over union of two binary masks; both empty scores 1.0."""
    pred = _as_binary(pred_mask, "pred_mask")
    gt = _as_binary(gt_mask, "gt_mask")
    _check_same_shape(pred, gt)
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    inter = int((pred & gt).sum())
    return inter / union


def mae(prob, gt_mask) -> float:
    """Mean absolute error between a probability map and a binary mask."""
    p = _as_prob(prob, "prob")
    gt = _as_binary(gt_mask, "gt_mask")
    _check_same_shape(p, gt)
    return float(np.abs(p - gt.astype(np.float64)).mean())


def _object_score(values: np.ndarray) -> float:
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(prob: np.ndarray, gt: np.ndarray) -> float:
    fg = prob[gt]
    bg = 1.0 - prob[~gt]
    u = float(gt.mean())
    return u * _object_score(fg) + (1.0 - u) * _object_score(bg)


def _round_half_up(v: float) -> int:
    # MATLAB rounds halves away from zero; the operands here are positive.
    return int(math.floor(v + 0.5))


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """1-based centroid column and row, rounded as the reference tool does."""
    rows, cols = gt.shape
    total = float(gt.sum())
    if total == 0:
        return _round_half_up(cols / 2.0), _round_half_up(rows / 2.0)
    cols_idx = np.arange(1, cols + 1, dtype=np.float64)
    rows_idx = np.arange(1, rows + 1, dtype=np.float64)
    x = _round_half_up(float((gt.sum(axis=0) * cols_idx).sum()) / total)
    y = _round_half_up(float((gt.sum(axis=1) * rows_idx).sum()) / total)
    return x, y


def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        # Empty quadrants carry zero area weight; their value never contributes.
        return 0.0
    gt = gt.astype(np.float64)
    x = float(pred.mean())
    y = float(gt.mean())
    norm = n - 1 + EPS
    sigma_x2 = float(((pred - x) ** 2).sum()) / norm
    sigma_y2 = float(((gt - y) ** 2).sum()) / norm
    sigma_xy = float(((pred - x) * (gt - y)).sum()) / norm
    alpha = 4.0 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x2 + sigma_y2)
    if alpha != 0.0:
        return alpha / (beta + EPS)
    if beta == 0.0:
        return 1.0
    return 0.0


def _s_region(prob: np.ndarray, gt: np.ndarray) -> float:
    x, y = _centroid(gt)
    rows, cols = gt.shape
    area = rows * cols
    w1 = (x * y) / area
    w2 = ((cols - x) * y) / area
    w3 = (x * (rows - y)) / area
    w4 = 1.0 - w1 - w2 - w3
    q1 = _region_ssim(prob[:y, :x], gt[:y, :x])
    q2 = _region_ssim(prob[:y, x:], gt[:y, x:])
    q3 = _region_ssim(prob[y:, :x], gt[y:, :x])
    q4 = _region_ssim(prob[y:, x:], gt[y:, x:])
    return w1 * q1 + w2 * q2 + w3 * q3 + w4 * q4


def s_measure(prob, gt_mask, alpha: float = 0.5) -> float:
    """Structure measure S_alpha between a probability map and a binary mask."""
    p = _as_prob(prob, "prob")
    gt = _as_binary(gt_mask, "gt_mask")
    _check_same_shape(p, gt)
    y = float(gt.mean())
    if y == 0.0:
        score = 1.0 - float(p.mean())
    elif y == 1.0:
        score = float(p.mean())
    else:
        score = alpha * _s_object(p, gt) + (1.0 - alpha) * _s_region(p, gt)
    return float(min(max(score, 0.0), 1.0))


def e_measure_binary(pred_mask, gt_mask) -> float:
    """Enhanced-alignment measure between two binary maps, clipped to [0, 1]."""
    fm = _as_binary(pred_mask, "pred_mask")
    gt = _as_binary(gt_mask, "gt_mask")
    _check_same_shape(fm, gt)
    n = gt.size
    dfm = fm.astype(np.float64)
    dgt = gt.astype(np.float64)
    if gt.sum() == 0:
        enhanced_sum = float((1.0 - dfm).sum())
    elif (~gt).sum() == 0:
        enhanced_sum = float(dfm.sum())
    else:
        align_fm = dfm - dfm.mean()
        align_gt = dgt - dgt.mean()
        align = 2.0 * align_gt * align_fm / (align_gt ** 2 + align_fm ** 2 + EPS)
        enhanced_sum = float((((align + 1.0) ** 2) / 4.0).sum())
    score = enhanced_sum / (n - 1 + EPS)
    return float(min(max(score, 0.0), 1.0))


def e_measure_max(prob, gt_mask, thresholds=None) -> float:
    """E_phi^max: the enhanced-alignment measure maximized over thresholds."""
    p = _as_prob(prob, "prob")
    gt = _as_binary(gt_mask, "gt_mask")
    _check_same_shape(p, gt)
    if thresholds is None:
        thresholds = E_MEASURE_THRESHOLDS
    best = 0.0
    for t in thresholds:
        best = max(best, e_measure_binary(p >= t, gt))
    return best


def circular_scan_area(shape) -> float:
    """Area of the inscribed circular scan region, pi * (W / 2)^2."""
    _, width = shape
    return math.pi * (width / 2.0) ** 2


def classify_frame(pred_mask, min_area_fraction: float = 0.0) -> str:
    """Label a frame "lesion" or "normal" from its predicted mask.

    A frame is a lesion frame when its positive area is nonzero and at least
    ``min_area_fraction`` of the circular scan area (ties count as lesion).
    """
    mask = _as_binary(pred_mask, "pred_mask")
    if min_area_fraction < 0:
        raise ValueError(f"min_area_fraction must be >= 0, got {min_area_fraction}")
    area = int(mask.sum())
    if area == 0:
        return NORMAL
    threshold = min_area_fraction * circular_scan_area(mask.shape)
    return LESION if area >= threshold else NORMAL


@dataclass(frozen=True)
class PerImageMetrics:
    """All metric values for a single frame."""

    image_id: str
    dice: float
    iou: float
    mae: float
    s_alpha: float
    e_phi: float
    gt_label: str
    pred_label: str


def compute_image_metrics(image_id: str, prob, gt_mask, threshold: float = 0.5,
                          min_area_fraction: float = 0.0) -> PerImageMetrics:
    """Evaluate one probability map against its ground truth."""
    p = _as_prob(prob, "prob")
    gt = _as_binary(gt_mask, "gt_mask")
    _check_same_shape(p, gt)
    pred = p >= threshold
    return PerImageMetrics(
        image_id=image_id,
        dice=dice(pred, gt),
        iou=iou(pred, gt),
        mae=mae(p, gt),
        s_alpha=s_measure(p, gt),
        e_phi=e_measure_max(p, gt),
        gt_label=LESION if gt.any() else NORMAL,
        pred_label=classify_frame(pred, min_area_fraction),
    )


AGGREGATE_FIELDS = ("dice", "iou", "mae", "s_alpha", "e_phi")


@dataclass
class MetricsReport:
    """Per-image metric records plus their aggregates.

    ``m_dice``/``m_iou``/``mae``/``s_alpha``/``e_phi`` are means over all
    frames. Because mean dice over frames with empty ground truth depends on a
    convention (both-empty scores 1.0), the lesion-frame-only means are also
    reported as ``m_dice_lesion``/``m_iou_lesion``.
    """

    per_image: list[PerImageMetrics] = field(default_factory=list)

    def __post_init__(self):
        self.per_image = list(self.per_image)

    def _mean(self, name: str, records=None) -> float:
        records = self.per_image if records is None else records
        if not records:
            return float("nan")
        return float(np.mean([getattr(r, name) for r in records]))

    @property
    def frame_count(self) -> int:
        return len(self.per_image)

    @property
    def m_dice(self) -> float:
        return self._mean("dice")

    @property
    def m_iou(self) -> float:
        return self._mean("iou")

    @property
    def mae(self) -> float:
        return self._mean("mae")

    @property
    def s_alpha(self) -> float:
        return self._mean("s_alpha")

    @property
    def e_phi(self) -> float:
        return self._mean("e_phi")

    @property
    def lesion_frames(self) -> list[PerImageMetrics]:
        return [r for r in self.per_image if r.gt_label == LESION]

    @property
    def m_dice_lesion(self) -> float:
        return self._mean("dice", self.lesion_frames)

    @property
    def m_iou_lesion(self) -> float:
        return self._mean("iou", self.lesion_frames)

    @property
    def fn_frames(self) -> int:
        """Lesion frames the model calls normal."""
        return sum(1 for r in self.per_image
                   if r.gt_label == LESION and r.pred_label == NORMAL)

    @property
    def fp_frames(self) -> int:
        """Normal frames the model calls lesion."""
        return sum(1 for r in self.per_image
                   if r.gt_label == NORMAL and r.pred_label == LESION)

    def aggregates(self) -> dict[str, float]:
        return {
            "frame_count": self.frame_count,
            "m_dice": self.m_dice,
            "m_iou": self.m_iou,
            "mae": self.mae,
            "s_alpha": self.s_alpha,
            "e_phi": self.e_phi,
            "m_dice_lesion": self.m_dice_lesion,
            "m_iou_lesion": self.m_iou_lesion,
            "fn_frames": self.fn_frames,
            "fp_frames": self.fp_frames,
        }

    def to_tsv_lines(self) -> list[str]:
        """Machine-readable form: one line per image, then an aggregate block."""
        lines = ["image_id\tdice\tiou\tmae\ts_alpha\te_phi\tgt_label\tpred_label"]
        for r in self.per_image:
            lines.append(
                f"{r.image_id}\t{r.dice:.6f}\t{r.iou:.6f}\t{r.mae:.6f}"
                f"\t{r.s_alpha:.6f}\t{r.e_phi:.6f}\t{r.gt_label}\t{r.pred_label}"
            )
        for key, value in self.aggregates().items():
            if isinstance(value, float):
                lines.append(f"aggregate\t{key}\t{value:.6f}")
            else:
                lines.append(f"aggregate\t{key}\t{value}")
        return lines

    def format_table(self) -> str:
        agg = self.aggregates()
        rows = [
            f"frames          {agg['frame_count']}",
            f"mDice           {agg['m_dice']:.4f}",
            f"mIoU            {agg['m_iou']:.4f}",
            f"MAE             {agg['mae']:.4f}",
            f"S_alpha         {agg['s_alpha']:.4f}",
            f"E_phi^max       {agg['e_phi']:.4f}",
            f"mDice (lesion)  {agg['m_dice_lesion']:.4f}",
            f"mIoU  (lesion)  {agg['m_iou_lesion']:.4f}",
            f"FN frames       {agg['fn_frames']}",
            f"FP frames       {agg['fp_frames']}",
        ]
        return "\n".join(rows)
