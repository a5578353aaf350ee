"""Image quality (MSE, PSNR, SSIM) and detection quality (AP, mAP50) metrics."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage, stats

from .fusion import Detection, iou
from .imaging import to_gray

PSNR_INF = math.inf


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _luma_ycbcr(img: np.ndarray) -> np.ndarray:
    """Studio-range Y (16-235) as used by most SR benchmarks."""
    if img.ndim == 2:
        return img
    return 16.0 + (65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2]) / 255.0


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, max_val: float = 255.0, y_channel: bool = False, crop: int = 0) -> float:
    """PSNR in dB over all pixels and channels; ``inf`` for identical images.

    ``y_channel``/``crop`` switch to the luma-only, border-cropped convention.
    """
    a, b = _pair(a, b)
    if y_channel:
        a, b = _luma_ycbcr(a), _luma_ycbcr(b)
    if crop:
        a, b = a[crop:-crop, crop:-crop], b[crop:-crop, crop:-crop]
    err = mse(a, b)
    if err == 0:
        return PSNR_INF
    return 10.0 * math.log10(max_val * max_val / err)


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0
    win_size: int = 11
    sigma: float = 1.5

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def ssim_map(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = to_gray(a), to_gray(b)
    r = params.win_size // 2
    if min(a.shape) < params.win_size:
        raise ValueError(f"images must be at least {params.win_size}px on each side for SSIM")
    x = np.arange(params.win_size) - r
    g = np.exp(-(x * x) / (2 * params.sigma ** 2))
    g /= g.sum()

    def filt(img):
        out = ndimage.correlate1d(img, g, axis=0, mode="constant")
        out = ndimage.correlate1d(out, g, axis=1, mode="constant")
        # keep only positions where the window fits entirely
        return out[r:img.shape[0] - r, r:img.shape[1] - r]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
        ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over valid window positions (RGB is reduced to BT.601 luma)."""
    return float(np.mean(ssim_map(a, b, params)))


# ---------------------------------------------------------------- detection

@dataclass(frozen=True)
class MatchedDetection:
    detection: Detection
    tp: bool


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class ApResult:
    per_class: dict[int, float | None]
    n_gt: dict[int, int]

    @property
    def map50(self) -> float:
        return map50(self.per_class.values())


def match_detections(dets: Sequence[Detection], gts: Sequence[Detection],
                     iou_min: float = 0.5) -> list[MatchedDetection]:
    """Greedy TP/FP labelling, highest score first, one match per ground truth.

    Each detection takes the still-unmatched GT (same image and class) with
    the highest IoU, provided that IoU is at least ``iou_min``.
    """
    gt_index = defaultdict(list)
    for g in gts:
        gt_index[(g.image_id, g.class_id)].append(g)
    used: dict[tuple, list[bool]] = {k: [False] * len(v) for k, v in gt_index.items()}
    order = sorted(range(len(dets)), key=lambda i: (dets[i].class_id, -dets[i].score, i))
    out = []
    for i in order:
        d = dets[i]
        key = (d.image_id, d.class_id)
        best, best_iou = -1, iou_min
        for j, g in enumerate(gt_index.get(key, ())):
            if used[key][j]:
                continue
            ov = iou(d, g)
            if ov >= best_iou and (best < 0 or ov > best_iou):
                best, best_iou = j, ov
        if best >= 0:
            used[key][best] = True
        out.append(MatchedDetection(d, best >= 0))
    return out


def _scored_flags(matched) -> tuple[np.ndarray, np.ndarray]:
    items = [(m.detection.score, m.tp) if isinstance(m, MatchedDetection) else m for m in matched]
    order = sorted(range(len(items)), key=lambda i: (-items[i][0], i))
    scores = np.array([items[i][0] for i in order], dtype=np.float64)
    tp = np.array([bool(items[i][1]) for i in order], dtype=bool)
    return scores, tp


def pr_curve(matched, n_gt: int) -> list[PrPoint]:
    """Precision/recall after each detection, sweeping the score threshold downward."""
    scores, tp = _scored_flags(matched)
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt if n_gt else np.zeros_like(tps, dtype=float)
    precision = tps / np.maximum(tps + fps, 1)
    return [PrPoint(float(s), float(p), float(r)) for s, p, r in zip(scores, precision, recall)]


def average_precision(matched, n_gt: int) -> float | None:
    """All-point interpolated AP (area under the precision envelope).

    ``matched`` holds MatchedDetections or ``(score, is_tp)`` pairs. Returns
    ``None`` for a class with neither ground truth nor detections.
    """
    matched = list(matched)
    if n_gt == 0:
        return None if not matched else 0.0
    if not matched:
        return 0.0
    pts = pr_curve(matched, n_gt)
    rec = np.concatenate([[0.0], [p.recall for p in pts], [1.0]])
    prec = np.concatenate([[0.0], [p.precision for p in pts], [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.nonzero(rec[1:] != rec[:-1])[0]
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def map50(aps) -> float:
    """Unweighted mean over classes, skipping classes with no GT and no detections."""
    vals = [a for a in aps if a is not None]
    return float(np.mean(vals)) if vals else 0.0


def evaluate_detections(dets: Sequence[Detection], gts: Sequence[Detection],
                        classes: Sequence[int] | None = None, iou_min: float = 0.5) -> ApResult:
    matched = match_detections(dets, gts, iou_min)
    if classes is None:
        classes = sorted({d.class_id for d in dets} | {g.class_id for g in gts})
    per_class, n_gt = {}, {}
    for c in classes:
        n_gt[c] = sum(1 for g in gts if g.class_id == c)
        per_class[c] = average_precision([m for m in matched if m.detection.class_id == c], n_gt[c])
    return ApResult(per_class, n_gt)


# ---------------------------------------------------------------- statistics

def mean_ci95(values: Sequence[float]) -> tuple[float, float, float]:
    """Student-t 95% interval: ``mean +/- t(0.975, n-1) * s / sqrt(n)`` with sample std ``s``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    mean = float(v.mean())
    half = float(stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))
    return mean, mean - half, mean + half


def format_ci(mean: float, lo: float, hi: float, label: str = "mAP50") -> str:
    return f"{label} of {mean:.4f} and a 95% CI: [{lo:.4f}, {hi:.4f}]"
