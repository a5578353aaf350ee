"""Detection ensembling: NMS, Soft-NMS and Weighted Boxes Fusion.

All three operate per ``(image_id, class_id)`` group (NMS/Soft-NMS can be
made class-agnostic) and are deterministic for a given input order.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CLASS_NAMES = ("missing_hole", "mouse_bite", "open_circuit", "short", "spur", "spurious_copper")


class DetectionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    score: float | None
    box: tuple[float, float, float, float]

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not all(0.0 <= v <= 1.0 for v in self.box):
            raise ValueError(f"box {self.box} not normalized to [0, 1]")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def _coords(b) -> Sequence[float]:
    return b.box if isinstance(b, Detection) else b


def iou(a, b) -> float:
    """Intersection over union of two boxes (Detections or ``[x1, y1, x2, y2]``)."""
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = ((box[2] - box[0]) * (box[3] - box[1])
             + (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1]) - inter)
    return np.where(overlap, inter / union, 0.0)


def _groups(dets: Sequence[Detection], class_aware: bool) -> dict:
    groups = defaultdict(list)
    for idx, d in enumerate(dets):
        key = (d.image_id, d.class_id) if class_aware else (d.image_id,)
        groups[key].append(idx)
    return groups


def _score_order(dets, indices):
    return sorted(indices, key=lambda i: (-dets[i].score, i))


def nms(dets: Sequence[Detection], iou_thr: float = 0.5, class_aware: bool = True) -> list[Detection]:
    """Greedy NMS: keep a box iff its IoU with every already-kept box is below ``iou_thr``."""
    if not 0 < iou_thr <= 1:
        raise ValueError(f"iou_thr must be in (0, 1], got {iou_thr}")
    kept: list[int] = []
    for indices in _groups(dets, class_aware).values():
        order = _score_order(dets, indices)
        boxes = np.array([dets[i].box for i in order], dtype=np.float64)
        alive = np.ones(len(order), dtype=bool)
        for pos in range(len(order)):
            if not alive[pos]:
                continue
            kept.append(order[pos])
            rest = np.arange(pos + 1, len(order))
            rest = rest[alive[rest]]
            if rest.size:
                alive[rest[_iou_one_to_many(boxes[pos], boxes[rest]) >= iou_thr]] = False
    return [dets[i] for i in _score_order(dets, kept)]


def soft_nms(dets: Sequence[Detection], iou_thr: float = 0.5, sigma: float = 0.5,
             mode: str = "gaussian", score_floor: float = 0.001,
             class_aware: bool = True) -> list[Detection]:
    """Soft-NMS rescoring.

    gaussian: ``s *= exp(-iou**2 / sigma)`` for every remaining box;
    linear: ``s *= 1 - iou`` for remaining boxes with ``iou > iou_thr``.
    Boxes whose score falls below ``score_floor`` are dropped.
    """
    if mode not in ("gaussian", "linear"):
        raise ValueError(f"unknown soft-nms mode {mode!r}")
    if mode == "gaussian" and sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0 < iou_thr <= 1:
        raise ValueError(f"iou_thr must be in (0, 1], got {iou_thr}")
    out: list[tuple[float, int]] = []
    for indices in _groups(dets, class_aware).values():
        scores = {i: dets[i].score for i in indices if dets[i].score >= score_floor}
        while scores:
            best = min(scores, key=lambda i: (-scores[i], i))
            out.append((scores.pop(best), best))
            for i in list(scores):
                overlap = iou(dets[best], dets[i])
                if mode == "gaussian":
                    scores[i] *= math.exp(-(overlap * overlap) / sigma)
                elif overlap > iou_thr:
                    scores[i] *= 1.0 - overlap
                if scores[i] < score_floor:
                    del scores[i]
    out.sort(key=lambda t: (-t[0], t[1]))
    return [replace(dets[i], score=s) for s, i in out]


@dataclass
class FusionCluster:
    members: list[Detection] = field(default_factory=list)
    model_indices: list[int] = field(default_factory=list)
    fused: Detection | None = None


class _RunningCluster:
    """Incremental sums for one cluster; the fused box is derived on demand."""

    __slots__ = ("sum_c", "sum_cx", "count", "box", "conf", "members", "models")

    def __init__(self):
        self.sum_c = 0.0
        self.sum_cx = [0.0, 0.0, 0.0, 0.0]
        self.count = 0
        self.members: list[Detection] = []
        self.models: list[int] = []

    def add(self, det: Detection, model: int) -> None:
        c = det.score
        self.sum_c += c
        for k in range(4):
            self.sum_cx[k] += c * det.box[k]
        self.count += 1
        self.members.append(det)
        self.models.append(model)
        self.conf = self.sum_c / self.count
        if self.sum_c > 0:
            self.box = tuple(s / self.sum_c for s in self.sum_cx)
        else:
            # every member scored 0: fall back to the plain mean
            self.box = tuple(sum(m.box[k] for m in self.members) / self.count for k in range(4))


def rescale_confidence(conf: float, t: int, n_models: int, conf_mode: str) -> float:
    if conf_mode == "avg_min":
        return conf * min(t, n_models) / n_models
    if conf_mode == "avg_t":
        # T can exceed N when one model contributes several boxes; keep C in [0, 1]
        return min(conf * t / n_models, 1.0)
    raise ValueError(f"unknown conf_mode {conf_mode!r}")


def wbf_clusters(model_outputs: Sequence[Sequence[Detection]], iou_thr: float = 0.55,
                 conf_mode: str = "avg_min") -> list[FusionCluster]:
    """Weighted Boxes Fusion, returning clusters with their fused detection."""
    if not model_outputs:
        raise ValueError("wbf needs at least one model output")
    n_models = len(model_outputs)
    tagged = [(d, m) for m, dets in enumerate(model_outputs) for d in dets]
    groups = defaultdict(list)
    for d, m in tagged:
        groups[(d.image_id, d.class_id)].append((d, m))

    result = []
    for (image_id, class_id), items in groups.items():
        items.sort(key=lambda dm: -dm[0].score)  # stable: ties keep model/input order
        clusters: list[_RunningCluster] = []
        for det, model in items:
            best, best_iou = -1, -1.0
            for ci, cl in enumerate(clusters):
                ov = iou(cl.box, det.box)
                if ov >= iou_thr and ov > best_iou:
                    best, best_iou = ci, ov
            if best < 0:
                clusters.append(_RunningCluster())
                best = len(clusters) - 1
            clusters[best].add(det, model)
        for cl in clusters:
            score = rescale_confidence(cl.conf, cl.count, n_models, conf_mode)
            fused = Detection(image_id, class_id, score, cl.box)
            result.append(FusionCluster(cl.members, cl.models, fused))
    return result


def wbf(model_outputs: Sequence[Sequence[Detection]], iou_thr: float = 0.55,
        conf_mode: str = "avg_min") -> list[Detection]:
    return [c.fused for c in wbf_clusters(model_outputs, iou_thr, conf_mode)]


# ---------------------------------------------------------------- JSON Lines

def detection_from_dict(obj: dict, require_score: bool = True) -> Detection:
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    image_id = obj.get("image_id")
    if not isinstance(image_id, str):
        raise ValueError("'image_id' must be a string")
    class_id = obj.get("class_id")
    if not isinstance(class_id, int) or isinstance(class_id, bool) or class_id < 0:
        raise ValueError("'class_id' must be a non-negative integer")
    score = obj.get("score")
    if score is None:
        if require_score:
            raise ValueError("missing 'score'")
    elif not isinstance(score, (int, float)) or isinstance(score, bool):
        raise ValueError("'score' must be a number")
    box = obj.get("box")
    if not (isinstance(box, list) and len(box) == 4
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box)):
        raise ValueError("'box' must be a list of four numbers")
    return Detection(image_id, class_id, None if score is None else float(score),
                     tuple(float(v) for v in box))


def detection_to_dict(d: Detection) -> dict:
    obj = {"image_id": d.image_id, "class_id": d.class_id}
    if d.score is not None:
        obj["score"] = d.score
    obj["box"] = list(d.box)
    return obj


def read_detections(path, require_score: bool = True) -> list[Detection]:
    """Parse a JSON Lines detection file; errors carry the 1-based line number."""
    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                dets.append(detection_from_dict(json.loads(line), require_score))
            except (ValueError, json.JSONDecodeError) as exc:
                raise DetectionFormatError(f"{path}:{lineno}: {exc}") from None
    return dets


def format_detections(dets: Iterable[Detection]) -> str:
    return "".join(json.dumps(detection_to_dict(d)) + "\n" for d in dets)


def write_detections(dets: Iterable[Detection], path) -> None:
    from .imaging import atomic_write
    atomic_write(Path(path), format_detections(dets).encode("utf-8"))
