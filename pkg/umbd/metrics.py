"""
Camouflaged-object evaluation measures.

Reference implementations of MAE, weighted F-measure, adaptive E-measure and
S-measure on HxW numpy maps. Predictions are probabilities in [0, 1] used
as-is (no min-max rescaling); ground truths are binarised at 0.5.
"""

import logging
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ShapeMismatchError
from .models import MetricRow

logger = logging.getLogger(__name__)

EPS = np.spacing(1)
METRIC_NAMES = ("mae", "f_beta_w", "e_phi", "s_alpha")


def _prepare(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).squeeze()
    gt = np.asarray(gt).squeeze() > 0.5
    if pred.shape != gt.shape or pred.ndim != 2:
        logger.error(f"Metric inputs must be matching 2-D maps, got {pred.shape} and {gt.shape}")
        raise ShapeMismatchError(f"Metric inputs must be matching 2-D maps, got {pred.shape} and {gt.shape}")
    return np.clip(pred, 0.0, 1.0), gt


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


# Weighted F-measure

def matlab_gaussian(shape: Tuple[int, int] = (7, 7), sigma: float = 5.0) -> np.ndarray:
    """Same kernel as MATLAB's fspecial('gaussian', shape, sigma)."""
    m, n = [(s - 1) / 2 for s in shape]
    y, x = np.ogrid[-m:m + 1, -n:n + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    total = h.sum()
    return h / total if total else h


def weighted_fmeasure(pred, gt, beta2: float = 1.0) -> float:
    """
    Weighted F-measure with Gaussian-propagated errors and distance-decayed importance.

    An all-background ground truth scores 0.
    """
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return 0.0

    dist, nearest = ndimage.distance_transform_edt(~gt, return_indices=True)
    error = np.abs(pred - gt)
    propagated = error.copy()
    background = ~gt
    propagated[background] = error[nearest[0][background], nearest[1][background]]

    smoothed = ndimage.convolve(propagated, matlab_gaussian((7, 7), 5.0), mode="constant", cval=0.0)
    dependent = np.where(gt & (smoothed < error), smoothed, error)

    importance = np.where(background, 2 - np.exp(np.log(0.5) / 5 * dist), 1.0)
    weighted_error = dependent * importance

    tp = gt.sum() - weighted_error[gt].sum()
    fp = weighted_error[background].sum()
    recall = 1 - weighted_error[gt].mean()
    precision = tp / (tp + fp + EPS)
    score = (1 + beta2) * recall * precision / (recall + beta2 * precision + EPS)
    return float(np.clip(score, 0.0, 1.0))


# E-measure

def adaptive_emeasure(pred, gt) -> float:
    """
    Enhanced-alignment measure of pred binarised at min(2 * mean(pred), 1).

    All-background ground truth scores the predicted-background fraction and
    all-foreground ground truth the predicted-foreground fraction; the result
    is clipped to 1.
    """
    pred, gt = _prepare(pred, gt)
    size = gt.size
    binary = pred >= min(2 * pred.mean(), 1.0)
    gt_fg = int(gt.sum())

    fg_fg = np.count_nonzero(binary & gt)
    fg_bg = np.count_nonzero(binary & ~gt)
    pred_fg = fg_fg + fg_bg
    pred_bg = size - pred_fg

    if gt_fg == 0:
        enhanced = pred_bg
    elif gt_fg == size:
        enhanced = pred_fg
    else:
        bg_fg = gt_fg - fg_fg
        bg_bg = pred_bg - bg_fg
        mean_pred = pred_fg / size
        mean_gt = gt_fg / size
        parts = [
            (fg_fg, 1 - mean_pred, 1 - mean_gt),
            (fg_bg, 1 - mean_pred, -mean_gt),
            (bg_fg, -mean_pred, 1 - mean_gt),
            (bg_bg, -mean_pred, -mean_gt),
        ]
        enhanced = 0.0
        for count, a, b in parts:
            align = 2 * a * b / (a * a + b * b + EPS)
            enhanced += (align + 1) ** 2 / 4 * count
    return float(min(enhanced / (size - 1 + EPS), 1.0))


# S-measure

def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    values = pred[gt]
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x * x + 1 + sigma + EPS)


def _object_score(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = np.where(gt, pred, 0.0)
    bg = np.where(~gt, 1 - pred, 0.0)
    return u * _s_object(fg, gt) + (1 - u) * _s_object(bg, ~gt)


def _centroid(gt: np.ndarray) -> Tuple[int, int]:
    h, w = gt.shape
    area = gt.sum()
    if area == 0:
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    x = np.round(np.sum(gt.sum(axis=0) * np.arange(w)) / area)
    y = np.round(np.sum(gt.sum(axis=1) * np.arange(h)) / area)
    return int(x) + 1, int(y) + 1


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    dof = max(n - 1, 1)
    sigma_x = np.sum((pred - x) ** 2) / dof
    sigma_y = np.sum((gt - y) ** 2) / dof
    sigma_xy = np.sum((pred - x) * (gt - y)) / dof
    alpha = 4 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x + sigma_y)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _region_score(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    gt_f = gt.astype(np.float64)
    quadrants = [
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    ]
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    weights = (w1, w2, w3, 1 - w1 - w2 - w3)
    return sum(wt * _ssim(pred[q], gt_f[q]) for wt, q in zip(weights, quadrants))


def smeasure(pred, gt, alpha: float = 0.5) -> float:
    """
    alpha * S_object + (1 - alpha) * S_region, regions split at the ground-truth centroid.

    Empty ground truth scores 1 - mean(pred); full ground truth scores mean(pred).
    """
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * _object_score(pred, gt) + (1 - alpha) * _region_score(pred, gt)
    return float(max(0.0, score))


# Aggregation

def evaluate_pair(pred, gt) -> Dict[str, float]:
    """All four measures for one prediction."""
    return {
        "mae": mae(pred, gt),
        "f_beta_w": weighted_fmeasure(pred, gt),
        "e_phi": adaptive_emeasure(pred, gt),
        "s_alpha": smeasure(pred, gt),
    }


class MetricAccumulator:
    """Collects per-image scores and averages them into a MetricRow."""

    def __init__(self):
        self.rows: List[Dict[str, float]] = []

    def step(self, pred, gt) -> Dict[str, float]:
        scores = evaluate_pair(pred, gt)
        self.rows.append(scores)
        return scores

    def __len__(self) -> int:
        return len(self.rows)

    def result(self) -> MetricRow:
        if not self.rows:
            raise ValueError("No predictions were evaluated")
        means = {name: float(np.mean([row[name] for row in self.rows])) for name in METRIC_NAMES}
        return MetricRow(sample_count=len(self.rows), **means)


def corpus_metrics(preds, gts) -> MetricRow:
    accumulator = MetricAccumulator()
    for pred, gt in zip(preds, gts):
        accumulator.step(pred, gt)
    return accumulator.result()
