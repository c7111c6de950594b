"""Detection accuracy, uncertainty error, retention curves and OOD scoring.

Detections are grouped per image as ``{image_id: [Detection, ...]}`` and
ground truth as ``{image_id: [(Box, class_id), ...]}``. Every AP reported
here is the class-averaged, all-point interpolated AP.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .geometry import CONF, N_BOX_CHANNELS, Box, Detection, boxes_iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RETENTION_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(1, 21))
ENTROPY_CLAMP = 1e-7

GroundTruth = tuple[Box, int]


@dataclass(frozen=True)
class EvaluatedDetection:
    detection: Detection
    matched: bool
    u_pred: float
    image_id: Hashable = None


@dataclass
class RetentionCurve:
    fractions: list[float]
    ap50_values: list[float]
    auc: float


@dataclass(frozen=True)
class OodScore:
    image_id: Hashable
    u_ood: float
    label: str  # "in_dist" or "ood"


def u_pred(confidence: float) -> float:
    return 1.0 - confidence


def _by_score(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5, image_id=None
) -> list[EvaluatedDetection]:
    """Greedy matching in descending score order.

    Each detection claims the unclaimed ground truth of its own class with the
    highest IoU, provided that IoU reaches ``iou_thresh``.
    """
    order = _by_score(dets)
    ious = (
        boxes_iou_matrix(
            [[dets[i].box.cx, dets[i].box.cy, dets[i].box.w, dets[i].box.h] for i in order],
            [[b.cx, b.cy, b.w, b.h] for b, _ in gts],
        )
        if order and gts
        else np.zeros((len(order), len(gts)))
    )
    gt_cls = np.array([c for _, c in gts], dtype=np.int64)
    claimed = np.zeros(len(gts), dtype=bool)
    out = []
    for row, i in enumerate(order):
        d = dets[i]
        cand = np.where((gt_cls == d.class_id) & ~claimed, ious[row], -1.0)
        matched = False
        if len(gts):
            j = int(np.argmax(cand))
            if cand[j] >= iou_thresh:
                claimed[j] = True
                matched = True
        out.append(EvaluatedDetection(d, matched, u_pred(d.confidence), image_id))
    return out


def average_precision(evaluated: Sequence[EvaluatedDetection], n_gt: int) -> float:
    """All-point interpolated AP from score-ranked TP/FP flags."""
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0:
        return 1.0 if not evaluated else 0.0
    if not evaluated:
        return 0.0
    scores = np.array([e.detection.score for e in evaluated])
    tp = np.array([e.matched for e in evaluated], dtype=np.float64)[np.argsort(-scores, kind="stable")]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(
    dets_by_image: Mapping[Hashable, Sequence[Detection]],
    gts_by_image: Mapping[Hashable, Sequence[GroundTruth]],
    iou_thresh: float = 0.5,
) -> list[EvaluatedDetection]:
    out = []
    for image_id, dets in dets_by_image.items():
        out.extend(match_detections(dets, gts_by_image.get(image_id, ()), iou_thresh, image_id))
    return out


def class_mean_ap(
    dets_by_image: Mapping[Hashable, Sequence[Detection]],
    gts_by_image: Mapping[Hashable, Sequence[GroundTruth]],
    iou_thresh: float,
) -> float:
    """AP at one IoU threshold, averaged over every class seen in GT or detections."""
    evaluated = evaluate_detections(dets_by_image, gts_by_image, iou_thresh)
    n_gt: dict[int, int] = {}
    for gts in gts_by_image.values():
        for _, c in gts:
            n_gt[c] = n_gt.get(c, 0) + 1
    per_class: dict[int, list[EvaluatedDetection]] = {c: [] for c in n_gt}
    for e in evaluated:
        per_class.setdefault(e.detection.class_id, []).append(e)
    if not per_class:
        return 1.0
    return float(np.mean([average_precision(per_class[c], n_gt.get(c, 0)) for c in sorted(per_class)]))


def mean_ap(dets_by_image, gts_by_image, thresholds: Iterable[float] = COCO_THRESHOLDS) -> dict[str, float]:
    thresholds = list(thresholds)
    aps = [class_mean_ap(dets_by_image, gts_by_image, t) for t in thresholds]
    ap50 = aps[thresholds.index(0.5)] if 0.5 in thresholds else class_mean_ap(dets_by_image, gts_by_image, 0.5)
    return {"mAP": float(np.mean(aps)), "AP50": ap50}


def group_by_image(evaluated: Iterable[EvaluatedDetection], image_ids: Iterable[Hashable] = ()) -> dict:
    groups: dict = {i: [] for i in image_ids}
    for e in evaluated:
        groups.setdefault(e.image_id, []).append(e.detection)
    return groups


def uncertainty_error(evaluated: Sequence[EvaluatedDetection]) -> dict[str, float]:
    """Best balanced rejection error over thresholds on ``u_pred``.

    A detection is rejected when its uncertainty exceeds ``delta``. Candidate
    thresholds are the midpoints between consecutive distinct uncertainties
    plus one value just below the minimum and one just above the maximum;
    the smallest minimiser wins.
    """
    u_c = np.sort([e.u_pred for e in evaluated if e.matched])
    u_i = np.sort([e.u_pred for e in evaluated if not e.matched])
    if len(u_c) == 0 or len(u_i) == 0:
        raise ValueError("uncertainty error needs both correct and incorrect detections")
    v = np.unique(np.concatenate([u_c, u_i]))
    cands = np.concatenate(([np.nextafter(v[0], -np.inf)], (v[:-1] + v[1:]) / 2, [np.nextafter(v[-1], np.inf)]))
    rejected_c = len(u_c) - np.searchsorted(u_c, cands, side="right")
    retained_i = np.searchsorted(u_i, cands, side="right")
    tprj = rejected_c / len(u_c)
    fprt = retained_i / len(u_i)
    ue = (tprj + fprt) / 2
    k = int(np.argmin(ue))
    return {"ue": float(ue[k]), "delta_opt": float(cands[k]), "tprj": float(tprj[k]), "fprt": float(fprt[k])}


def binary_entropy(p, clamp: float = ENTROPY_CLAMP):
    q = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    h = -q * np.log(q) - (1.0 - q) * np.log(1.0 - q)
    return float(h) if h.ndim == 0 else h


def anchor_ood_terms(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Per-anchor product of box/confidence disagreement and class-entropy gap."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != beta.shape:
        raise ValueError("tandem grids must share a shape")
    d = alpha[..., : CONF + 1] - beta[..., : CONF + 1]
    disagreement = np.sqrt(np.sum(d**2, axis=-1))
    gap = binary_entropy(alpha[..., N_BOX_CHANNELS:]) - binary_entropy(beta[..., N_BOX_CHANNELS:])
    entropy_gap = np.sqrt(np.sum(np.asarray(gap) ** 2, axis=-1))
    return disagreement * entropy_gap


def u_ood_image(out) -> float:
    """Mean over all anchors of (tandem disagreement x tandem entropy gap)."""
    alpha, beta = (out.alpha, out.beta) if hasattr(out, "alpha") else out
    alpha = alpha.detach().cpu().numpy() if hasattr(alpha, "detach") else alpha
    beta = beta.detach().cpu().numpy() if hasattr(beta, "detach") else beta
    return float(np.mean(anchor_ood_terms(alpha, beta)))


def u_ood_single(decoded: np.ndarray) -> float:
    """Single-head fallback: one minus the highest anchor confidence."""
    return 1.0 - float(np.max(np.asarray(decoded)[..., CONF]))


def _retained_count(f: float, n: int) -> int:
    # round first so 0.15 * 20 counts as 3, not 3.0000000000000004
    return min(n, math.ceil(round(f * n, 9)))


def retention_curve(
    evaluated: Sequence[EvaluatedDetection],
    gts_by_image: Mapping[Hashable, Sequence[GroundTruth]],
    fractions: Sequence[float] = RETENTION_FRACTIONS,
) -> RetentionCurve:
    """AP50 while keeping only the most certain fraction of detections.

    For each fraction f the cut-off is the uncertainty of the ceil(f * N)-th
    most certain detection, and every detection at or below it is kept, so
    ties in ``u_pred`` are never split. AP50 is recomputed against the full
    ground truth; at f = 1.0 every detection is kept and the value is AP50 on
    the full list.
    """
    fractions = [float(f) for f in fractions]
    if any(b <= a for a, b in zip(fractions, fractions[1:])) or not 0 < fractions[0] or fractions[-1] > 1:
        raise ValueError("fractions must be ascending within (0, 1]")
    n = len(evaluated)
    if n == 0:
        return RetentionCurve(fractions, [0.0] * len(fractions), 0.0)
    u = np.array([e.u_pred for e in evaluated])
    ranked = np.sort(u)
    ids = list(gts_by_image)
    values = []
    for f in fractions:
        keep = u <= ranked[_retained_count(f, n) - 1]
        subset = [e for e, k in zip(evaluated, keep) if k]
        values.append(class_mean_ap(group_by_image(subset, ids), gts_by_image, 0.5))
    span = fractions[-1] - fractions[0]
    auc = float(np.trapezoid(values, fractions) / span) if span > 0 else float(values[0])
    return RetentionCurve(fractions, values, auc)


def roc_auc(scores: Sequence[OodScore]) -> float:
    """Probability an OOD image outscores an in-distribution one (ties count half)."""
    u = np.array([s.u_ood for s in scores], dtype=np.float64)
    is_ood = np.array([s.label == "ood" for s in scores])
    n_pos, n_neg = int(is_ood.sum()), int((~is_ood).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both in-distribution and OOD scores")
    ranks = rankdata(u)
    return float((ranks[is_ood].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
