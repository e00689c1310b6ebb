"""Bipartite matching, the set-prediction detection loss, and the combined objective."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import DomainLabel
from .decoder import InstancePrediction
from .errors import ContractError, ShapeError
from .tensor import Tensor

# ----------------------------------------------------------------------
# boxes


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    x0, y0, x1, y1 = np.moveaxis(boxes, -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def box_area(xyxy: np.ndarray) -> np.ndarray:
    return (xyxy[..., 2] - xyxy[..., 0]) * (xyxy[..., 3] - xyxy[..., 1])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and union for every pair of corner-form boxes, shapes (n, m)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union, union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Generalized IoU for every pair of corner-form boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iou, union = pairwise_iou(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    enclosing = wh[..., 0] * wh[..., 1]
    return iou - (enclosing - union) / enclosing


def giou_matched(pred_cxcywh: Tensor, target_xyxy: np.ndarray) -> Tensor:
    """Differentiable gIoU between row-aligned predicted and target boxes, shape (M,)."""
    cx, cy, w, h = (pred_cxcywh[:, i] for i in range(4))
    px0, py0, px1, py1 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    tx0, ty0, tx1, ty1 = (np.ascontiguousarray(target_xyxy[:, i]) for i in range(4))
    iw = T.maximum(T.minimum(px1, tx1) - T.maximum(px0, tx0), 0.0)
    ih = T.maximum(T.minimum(py1, ty1) - T.maximum(py0, ty0), 0.0)
    inter = iw * ih
    union = w * h + (tx1 - tx0) * (ty1 - ty0) - inter
    ew = T.maximum(px1, tx1) - T.minimum(px0, tx0)
    eh = T.maximum(py1, ty1) - T.minimum(py0, ty0)
    enclosing = ew * eh
    return inter / union - (enclosing - union) / enclosing


# ----------------------------------------------------------------------
# assignment


@dataclass
class CostMatrix:
    values: np.ndarray  # (N predictions, G targets)
    components: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ShapeError(f"cost matrix must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("cost matrix has non-finite entries")


@dataclass
class Assignment:
    """pred_indices[k] is matched to gt_indices[k]; gt_indices is 0..G-1 in order."""

    pred_indices: np.ndarray
    gt_indices: np.ndarray
    total_cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(p), int(g)) for p, g in zip(self.pred_indices, self.gt_indices)]

    def as_dict(self) -> dict[int, int]:
        return {int(p): int(g) for p, g in zip(self.pred_indices, self.gt_indices)}


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of all G targets to N >= G predictions.

    Among optimal assignments the one whose prediction sequence, listed in
    target order, is lexicographically smallest is returned. The secondary key
    is carried exactly (integers) alongside the float cost, so ties between
    exactly equal costs resolve deterministically.
    """
    if not isinstance(cost, CostMatrix):
        cost = CostMatrix(cost)
    c = cost.values
    n_pred, n_gt = c.shape
    if n_pred < n_gt:
        raise ContractError(f"need at least as many predictions as targets, got {n_pred} < {n_gt}")
    if n_gt == 0:
        return Assignment(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 0.0)

    # rows are targets (n <= m), columns are predictions; 1-based with a dummy column 0
    n, m = n_gt, n_pred
    weights = [m ** (n - 1 - g) for g in range(n)]
    primary = c.T.tolist()
    inf = math.inf
    u1, u2 = [0.0] * (n + 1), [0] * (n + 1)
    v1, v2 = [0.0] * (m + 1), [0] * (m + 1)
    match = [0] * (m + 1)  # match[j] = row assigned to column j
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        min1, min2 = [inf] * (m + 1), [0] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            row = primary[i0 - 1]
            wt = weights[i0 - 1]
            d1, d2, j1 = inf, 0, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                r1 = row[j - 1] - u1[i0] - v1[j]
                r2 = (j - 1) * wt - u2[i0] - v2[j]
                if r1 < min1[j] or (r1 == min1[j] and r2 < min2[j]):
                    min1[j], min2[j] = r1, r2
                    way[j] = j0
                if min1[j] < d1 or (min1[j] == d1 and min2[j] < d2):
                    d1, d2, j1 = min1[j], min2[j], j
            for j in range(m + 1):
                if used[j]:
                    u1[match[j]] += d1
                    u2[match[j]] += d2
                    v1[j] -= d1
                    v2[j] -= d2
                else:
                    min1[j] -= d1
                    min2[j] -= d2
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break

    pred_for_gt = np.zeros(n, dtype=int)
    for j in range(1, m + 1):
        if match[j]:
            pred_for_gt[match[j] - 1] = j - 1
    gts = np.arange(n)
    return Assignment(pred_for_gt, gts, float(c[pred_for_gt, gts].sum()))


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive minimum over all injective maps; reference for small matrices."""
    c = np.asarray(cost.values if isinstance(cost, CostMatrix) else cost, dtype=float)
    n_pred, n_gt = c.shape
    if n_pred < n_gt:
        raise ContractError(f"need at least as many predictions as targets, got {n_pred} < {n_gt}")
    best, best_perm = math.inf, None
    gts = np.arange(n_gt)
    for perm in itertools.permutations(range(n_pred), n_gt):
        total = float(c[list(perm), gts].sum())
        if total < best:
            best, best_perm = total, perm
    return Assignment(np.array(best_perm, dtype=int), gts, best)


@dataclass
class MatchWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0


def match_cost(class_probs: np.ndarray, boxes: np.ndarray, target_labels, target_boxes, weights: MatchWeights | None = None) -> CostMatrix:
    """DETR matching cost for one image.

    ``class_probs`` (N, C+1) are softmax probabilities, ``boxes`` (N, 4) and
    ``target_boxes`` (G, 4) are normalized (cx, cy, w, h).
    """
    w = weights or MatchWeights()
    labels = np.asarray(target_labels, dtype=int)
    tboxes = np.asarray(target_boxes, dtype=float).reshape(-1, 4)
    if labels.size == 0:
        raise ContractError("match_cost needs at least one target")
    probs = np.asarray(class_probs, dtype=float)
    boxes = np.asarray(boxes, dtype=float)
    cls = -probs[:, labels]
    l1 = np.abs(boxes[:, None, :] - tboxes[None, :, :]).sum(-1)
    giou = -pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(tboxes))
    values = w.cls * cls + w.l1 * l1 + w.giou * giou
    return CostMatrix(values, {"class": cls, "l1": l1, "giou": giou})


@dataclass
class DetectionLossWeights:
    ce: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    no_object: float = 0.1


def match_batch(pred: InstancePrediction, targets: list[tuple[np.ndarray, np.ndarray]], weights: MatchWeights | None = None) -> list[Assignment]:
    logits = pred.class_logits.data
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    out = []
    for b, (labels, boxes) in enumerate(targets):
        if len(labels) == 0:
            out.append(Assignment(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 0.0))
            continue
        out.append(hungarian(match_cost(probs[b], pred.boxes.data[b], labels, boxes, weights)))
    return out


def detection_loss(
    pred: InstancePrediction,
    targets: list[tuple[np.ndarray, np.ndarray]],
    assignments: list[Assignment],
    weights: DetectionLossWeights | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Set-prediction loss for a batch: weighted CE over C+1 classes plus L1 and gIoU on matched boxes.

    ``pred`` tensors are (B, N, ...). Assignments are treated as constants.
    Returns the scalar loss and its components.
    """
    w = weights or DetectionLossWeights()
    logits = pred.class_logits
    if logits.ndim == 2:
        raise ShapeError("detection_loss expects batched predictions (B, N, C+1)")
    B, N, K = logits.shape
    if len(targets) != B or len(assignments) != B:
        raise ContractError(f"got {len(targets)} targets and {len(assignments)} assignments for batch {B}")
    no_obj = K - 1
    target_cls = np.full((B, N), no_obj, dtype=int)
    bi, pi, tb = [], [], []
    for b, ((labels, boxes), a) in enumerate(zip(targets, assignments)):
        labels = np.asarray(labels, dtype=int)
        if len(a.gt_indices) != len(labels):
            raise ContractError(f"assignment for image {b} covers {len(a.gt_indices)} of {len(labels)} targets")
        target_cls[b, a.pred_indices] = labels[a.gt_indices]
        bi.extend([b] * len(a.pred_indices))
        pi.extend(a.pred_indices.tolist())
        tb.append(np.asarray(boxes, dtype=float).reshape(-1, 4)[a.gt_indices])
    cls_weight = np.where(target_cls == no_obj, w.no_object, 1.0)

    logp = T.log_softmax(logits, axis=-1)
    bb, nn_ = np.meshgrid(np.arange(B), np.arange(N), indexing="ij")
    picked = logp[bb.ravel(), nn_.ravel(), target_cls.ravel()]
    cw = cls_weight.ravel()
    loss_ce = -(picked * cw).sum() * (1.0 / cw.sum())

    num_boxes = max(1, len(pi))
    parts = {"ce": loss_ce}
    if pi:
        tboxes = np.concatenate(tb, axis=0).astype(logits.dtype)
        pboxes = pred.boxes[np.array(bi), np.array(pi)]
        loss_l1 = T.tabs(pboxes - tboxes).sum() * (1.0 / num_boxes)
        loss_giou = (1.0 - giou_matched(pboxes, cxcywh_to_xyxy(tboxes).astype(logits.dtype))).sum() * (1.0 / num_boxes)
        parts["l1"], parts["giou"] = loss_l1, loss_giou
        total = loss_ce * w.ce + loss_l1 * w.l1 + loss_giou * w.giou
    else:
        total = loss_ce * w.ce
    return total, {k: float(v.data) for k, v in parts.items()}


# ----------------------------------------------------------------------
# combined objective

COMPONENTS = ("det", "cq", "fq", "bc", "dc")


@dataclass
class LossWeights:
    cq: float = 10.0
    fq: float = 10.0
    bc: float = 1.0
    dc: float = 0.5
    det: float = 1.0


@dataclass
class LossReport:
    l_det: float
    l_cq: float
    l_fq: float
    l_bc: float
    l_dc: float
    total: float
    weights: LossWeights
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def record(self) -> dict:
        return {
            "l_det": self.l_det,
            "l_cq": self.l_cq,
            "l_fq": self.l_fq,
            "l_bc": self.l_bc,
            "l_dc": self.l_dc,
            "total": self.total,
            "lambda_cq": self.weights.cq,
            "lambda_fq": self.weights.fq,
            "lambda_bc": self.weights.bc,
            "lambda_dc": self.weights.dc,
        }


def total_loss(
    components: dict[str, Tensor | float | None],
    weights: LossWeights | None = None,
    domain=None,
    box_supervision: bool | None = None,
) -> LossReport:
    """Weighted sum  bc*L_bc + dc*L_dc + cq*L_cq + fq*L_fq + L_det.

    Missing or ``None`` components are switched off and reported as 0. When
    ``domain`` is the target domain, box supervision is a contract violation.
    """
    w = weights or LossWeights()
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ContractError(f"unknown loss components {sorted(unknown)}")
    if domain is not None and DomainLabel.parse(domain) is DomainLabel.TARGET:
        if box_supervision or components.get("det") is not None:
            raise ContractError("target-domain samples carry image-level tags only; box supervision requested")
    total = None
    values = {}
    for name in ("bc", "dc", "cq", "fq", "det"):
        comp = components.get(name)
        if comp is None:
            values[name] = 0.0
            continue
        comp = T.as_tensor(comp)
        values[name] = float(comp.data)
        term = comp * getattr(w, name)
        total = term if total is None else total + term
    if total is None:
        total = T.Tensor(0.0)
    return LossReport(
        l_det=values["det"],
        l_cq=values["cq"],
        l_fq=values["fq"],
        l_bc=values["bc"],
        l_dc=values["dc"],
        total=float(total.data),
        weights=w,
        tensor=total,
    )
