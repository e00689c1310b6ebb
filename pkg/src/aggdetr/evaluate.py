"""VOC-style mean average precision.

AP uses the all-point (continuous) interpolation: precision is replaced by its
monotone upper envelope and integrated over every recall change. Detections
are ranked by score per class and matched greedily to the highest-IoU ground
truth in the same image; a detection whose best ground truth is already taken
counts as a false positive. Classes without ground truth are reported as NaN
and left out of the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .matching import cxcywh_to_xyxy, pairwise_iou


@dataclass
class Detection:
    image: int
    label: int
    score: float
    box: np.ndarray  # normalized cxcywh


@dataclass
class EvalResult:
    per_class_ap: list[float]
    mean_ap: float
    sample_count: int
    config_fingerprint: str = ""
    iou_threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": [None if np.isnan(a) else float(a) for a in self.per_class_ap],
            "mean_ap": float(self.mean_ap),
            "sample_count": self.sample_count,
            "config_fingerprint": self.config_fingerprint,
            "iou_threshold": self.iou_threshold,
            **self.extra,
        }


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the interpolated precision-recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def class_ap(detections: list[Detection], ground_truth: dict[int, np.ndarray], iou_threshold: float = 0.5) -> float:
    """AP for one class. ``ground_truth`` maps image index -> (G, 4) cxcywh boxes of that class."""
    n_gt = sum(len(b) for b in ground_truth.values())
    if n_gt == 0:
        return float("nan")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    taken = {img: np.zeros(len(b), dtype=bool) for img, b in ground_truth.items()}
    gt_xyxy = {img: cxcywh_to_xyxy(b) for img, b in ground_truth.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = detections[i]
        boxes = gt_xyxy.get(det.image)
        if boxes is None or len(boxes) == 0:
            fp[rank] = 1
            continue
        ious, _ = pairwise_iou(cxcywh_to_xyxy(det.box)[None], boxes)
        best = int(np.argmax(ious[0]))
        if ious[0, best] >= iou_threshold and not taken[det.image][best]:
            taken[det.image][best] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    return average_precision(recall, precision)


def mean_average_precision(
    detections: list[Detection],
    ground_truth: list[tuple[np.ndarray, np.ndarray]],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> tuple[list[float], float]:
    """Per-class AP and their mean; ``ground_truth[i]`` = (labels, cxcywh boxes) of image i."""
    if not ground_truth:
        raise ContractError("cannot evaluate an empty split")
    per_class = []
    for c in range(num_classes):
        gts = {}
        for img, (labels, boxes) in enumerate(ground_truth):
            labels = np.asarray(labels, dtype=int)
            gts[img] = np.asarray(boxes, dtype=float).reshape(-1, 4)[labels == c]
        per_class.append(class_ap([d for d in detections if d.label == c], gts, iou_threshold))
    valid = [a for a in per_class if not np.isnan(a)]
    return per_class, float(np.mean(valid)) if valid else float("nan")


def detections_from_prediction(class_logits: np.ndarray, boxes: np.ndarray, image_offset: int = 0, score_threshold: float = 0.0) -> list[Detection]:
    """One detection per query: best non-background class and its softmax probability."""
    logits = np.asarray(class_logits, dtype=np.float64)
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    fg = probs[..., :-1]
    labels = fg.argmax(-1)
    scores = fg.max(-1)
    out = []
    for b in range(logits.shape[0]):
        for q in range(logits.shape[1]):
            if scores[b, q] >= score_threshold:
                out.append(Detection(image_offset + b, int(labels[b, q]), float(scores[b, q]), np.asarray(boxes[b, q], dtype=float)))
    return out


def evaluate_map(model, samples, iou_threshold: float = 0.5, batch_size: int = 32) -> EvalResult:
    """Run the inference path over ``samples`` and score it against their evaluation boxes."""
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    gts = [s.eval_targets() for s in samples]
    dets: list[Detection] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        pred = model.predict(np.stack([s.image for s in chunk]))
        dets.extend(
            detections_from_prediction(pred.class_logits.data, pred.boxes.data, start, model.config.score_threshold)
        )
    per_class, mean_ap = mean_average_precision(dets, gts, model.config.num_classes, iou_threshold)
    return EvalResult(per_class, mean_ap, len(samples), model.config.fingerprint(), iou_threshold)
