"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (explicit pixel loops,
per-element arithmetic in double precision) so that a slip in the library's
vectorized code cannot hide in a shared formula. The structure/alignment
measures are direct transcriptions of the published MATLAB evaluation
routines, including their epsilon, sample standard deviation, 1-based rounded
centroid and (N - 1) normalization. The alignment-measure oracle is written
over the four (prediction, truth) value combinations instead of full
matrices, which is an algebraically equal but structurally different route.
"""

import math

import numpy as np
import torch

MATLAB_EPS = 2.220446049250313e-16


# --------------------------------------------------------------------------
# Pooling / loss oracles

def naive_clipped_meanpool(gt: np.ndarray, kernel_size: int) -> np.ndarray:
    """Sliding-window mean with the window clipped at the borders."""
    h, w = gt.shape
    half = kernel_size // 2
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            count = 0
            for di in range(-half, half + 1):
                for dj in range(-half, half + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        acc += float(gt[ii, jj])
                        count += 1
            out[i, j] = acc / count
    return out


def naive_weight_map(gt: np.ndarray, kernel_size: int = 31,
                     gain: float = 5.0) -> np.ndarray:
    pooled = naive_clipped_meanpool(gt, kernel_size)
    return 1.0 + gain * np.abs(pooled - gt.astype(np.float64))


def _stable_bce(logit: float, label: float) -> float:
    # max(x, 0) - x*g + log(1 + exp(-|x|)), the log-sum-exp form.
    return max(logit, 0.0) - logit * label + math.log1p(math.exp(-abs(logit)))


def naive_weighted_bce(logits: np.ndarray, gt: np.ndarray,
                       weights: np.ndarray) -> float:
    h, w = gt.shape
    num = 0.0
    den = 0.0
    for i in range(h):
        for j in range(w):
            num += weights[i, j] * _stable_bce(float(logits[i, j]), float(gt[i, j]))
            den += weights[i, j]
    return num / den


def naive_weighted_iou(logits: np.ndarray, gt: np.ndarray,
                       weights: np.ndarray, smooth: float = 1.0) -> float:
    h, w = gt.shape
    inter = 0.0
    union = 0.0
    for i in range(h):
        for j in range(w):
            p = 1.0 / (1.0 + math.exp(-float(logits[i, j])))
            g = float(gt[i, j])
            inter += weights[i, j] * p * g
            union += weights[i, j] * (p + g - p * g)
    return 1.0 - (inter + smooth) / (union + smooth)


# --------------------------------------------------------------------------
# Overlap metric oracles

def naive_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = 0
    total = 0
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            p = bool(pred[i, j])
            g = bool(gt[i, j])
            inter += p and g
            total += p + g
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def naive_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = 0
    union = 0
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            p = bool(pred[i, j])
            g = bool(gt[i, j])
            inter += p and g
            union += p or g
    if union == 0:
        return 1.0
    return inter / union


def naive_mae(prob: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            acc += abs(float(prob[i, j]) - float(gt[i, j]))
    return acc / (h * w)


# --------------------------------------------------------------------------
# Structure measure (transcribed from the published MATLAB routine)

def _matlab_round(v: float) -> int:
    return int(math.floor(v + 0.5))  # positive operands only


def _object_term(values: list[float]) -> float:
    n = len(values)
    x = sum(values) / n
    if n > 1:
        sigma = math.sqrt(sum((v - x) ** 2 for v in values) / (n - 1))
    else:
        sigma = 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + MATLAB_EPS)


def _ssim_term(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    pv = [float(v) for v in pred.reshape(-1)]
    gv = [float(v) for v in gt.reshape(-1)]
    x = sum(pv) / n
    y = sum(gv) / n
    norm = n - 1 + MATLAB_EPS
    sx2 = sum((v - x) ** 2 for v in pv) / norm
    sy2 = sum((v - y) ** 2 for v in gv) / norm
    sxy = sum((p - x) * (g - y) for p, g in zip(pv, gv)) / norm
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx2 + sy2)
    if alpha != 0.0:
        return alpha / (beta + MATLAB_EPS)
    if beta == 0.0:
        return 1.0
    return 0.0


def reference_s_measure(prob: np.ndarray, gt: np.ndarray,
                        alpha: float = 0.5) -> float:
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    h, w = gt.shape
    total = int(gt.sum())
    if total == 0:
        return 1.0 - float(prob.mean())
    if total == h * w:
        return float(prob.mean())

    fg = [float(prob[i, j]) for i in range(h) for j in range(w) if gt[i, j]]
    bg = [1.0 - float(prob[i, j]) for i in range(h) for j in range(w) if not gt[i, j]]
    u = total / (h * w)
    s_object = u * _object_term(fg) + (1.0 - u) * _object_term(bg)

    x_c = _matlab_round(sum((j + 1) * int(gt[:, j].sum()) for j in range(w)) / total)
    y_c = _matlab_round(sum((i + 1) * int(gt[i, :].sum()) for i in range(h)) / total)
    area = h * w
    w1 = (x_c * y_c) / area
    w2 = ((w - x_c) * y_c) / area
    w3 = (x_c * (h - y_c)) / area
    w4 = 1.0 - w1 - w2 - w3
    gtd = gt.astype(np.float64)
    s_region = (
        w1 * _ssim_term(prob[:y_c, :x_c], gtd[:y_c, :x_c])
        + w2 * _ssim_term(prob[:y_c, x_c:], gtd[:y_c, x_c:])
        + w3 * _ssim_term(prob[y_c:, :x_c], gtd[y_c:, :x_c])
        + w4 * _ssim_term(prob[y_c:, x_c:], gtd[y_c:, x_c:])
    )
    score = alpha * s_object + (1.0 - alpha) * s_region
    return max(score, 0.0)


# --------------------------------------------------------------------------
# Enhanced-alignment measure (transcribed, unclipped)

def reference_e_measure_binary(fm: np.ndarray, gt: np.ndarray) -> float:
    """Alignment measure for binary maps via the four value combinations.

    Returns the raw (N - 1)-normalized score without clipping, so a perfect
    match evaluates to N / (N - 1), slightly above 1.
    """
    fm = np.asarray(fm).astype(bool)
    gt = np.asarray(gt).astype(bool)
    h, w = gt.shape
    n = h * w
    ng = int(gt.sum())
    if ng == 0:
        enhanced_sum = float(n - int(fm.sum()))
    elif ng == n:
        enhanced_sum = float(fm.sum())
    else:
        mu_f = float(fm.sum()) / n
        mu_g = ng / n
        enhanced_sum = 0.0
        for f_val in (0.0, 1.0):
            for g_val in (0.0, 1.0):
                count = int(((fm == bool(f_val)) & (gt == bool(g_val))).sum())
                if count == 0:
                    continue
                af = f_val - mu_f
                ag = g_val - mu_g
                align = 2.0 * ag * af / (ag * ag + af * af + MATLAB_EPS)
                enhanced_sum += count * ((align + 1.0) ** 2) / 4.0
    return enhanced_sum / (n - 1 + MATLAB_EPS)


def reference_e_measure_max(prob: np.ndarray, gt: np.ndarray,
                            num_thresholds: int = 256) -> float:
    best = 0.0
    for t in np.linspace(0.0, 1.0, num_thresholds):
        best = max(best, reference_e_measure_binary(prob >= t, gt))
    return best


# --------------------------------------------------------------------------
# Gradient oracle

def finite_difference_gradient(func, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar-valued function at ``x``."""
    grad = torch.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.numel()):
        original = flat_x[i].item()
        flat_x[i] = original + h
        f_plus = float(func(x))
        flat_x[i] = original - h
        f_minus = float(func(x))
        flat_x[i] = original
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom
