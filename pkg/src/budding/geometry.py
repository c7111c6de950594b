"""Box algebra, grid decoding, anchor assignment and NMS.

All coordinates are fractions of the image side. Pixel coordinates are
converted at the boundary with :meth:`Box.from_pixels` / :meth:`Box.to_pixels`.
Grid arrays are indexed ``[row, col, anchor, channel]`` where ``row`` follows
the vertical axis (``cy``) and ``col`` the horizontal one (``cx``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# decoded channel layout: x offset in cell, y offset in cell, w, h, confidence, classes...
X, Y, W, H, CONF = range(5)
N_BOX_CHANNELS = 5
MIN_SIZE = 1e-6


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside the unit square: {self}")
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"box must have positive size: {self}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> Box:
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_pixels(cls, x1, y1, x2, y2, image_size: int) -> Box:
        s = float(image_size)
        return cls.from_corners(x1 / s, y1 / s, x2 / s, y2 / s)

    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2, self.h / 2
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def to_pixels(self, image_size: int) -> tuple[float, float, float, float]:
        return tuple(c * image_size for c in self.corners())

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class GridSpec:
    S: int = 8
    B: int = 2
    anchor_sizes: tuple[tuple[float, float], ...] = ((0.15, 0.15), (0.3, 0.3))
    K: int = 3

    def __post_init__(self):
        object.__setattr__(self, "anchor_sizes", tuple(tuple(map(float, a)) for a in self.anchor_sizes))
        if self.S < 1 or self.B < 1 or self.K < 1:
            raise ValueError("S, B and K must be positive")
        if len(self.anchor_sizes) != self.B:
            raise ValueError(f"expected {self.B} anchor priors, got {len(self.anchor_sizes)}")
        if any(w <= 0 or h <= 0 for w, h in self.anchor_sizes):
            raise ValueError("anchor priors must be positive")

    @property
    def channels(self) -> int:
        return N_BOX_CHANNELS + self.K

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.S, self.S, self.B, self.channels)


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float
    class_probs: tuple[float, ...]

    @property
    def class_id(self) -> int:
        # np.argmax returns the first maximum, so ties go to the lowest index
        return int(np.argmax(self.class_probs))

    @property
    def score(self) -> float:
        return self.confidence


@dataclass
class ResponsibilityMask:
    obj: np.ndarray
    noobj: np.ndarray


@dataclass
class Targets:
    """Regression targets for the responsible anchors (zeros elsewhere)."""

    box: np.ndarray  # S x S x B x 4: x offset, y offset, w, h
    cls: np.ndarray  # S x S x B, -1 where no object
    dropped: int = 0


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def average_boxes(a: Box, b: Box) -> Box:
    return Box((a.cx + b.cx) / 2, (a.cy + b.cy) / 2, (a.w + b.w) / 2, (a.h + b.h) / 2)


def _sigmoid(x):
    # split by sign so large |x| never overflows exp
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(raw: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Map raw head activations to the decoded channel layout.

    Offsets, confidence and class scores go through a sigmoid; width and
    height are ``prior * exp(t)`` clipped to ``[MIN_SIZE, 1]``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-4:] != grid.shape:
        raise ValueError(f"raw grid shape {raw.shape} does not match {grid.shape}")
    out = _sigmoid(raw)
    priors = np.asarray(grid.anchor_sizes)
    for ch, k in ((W, 0), (H, 1)):
        p = priors[:, k]
        t = np.clip(raw[..., ch], np.log(MIN_SIZE / p), np.log(1.0 / p))
        out[..., ch] = p * np.exp(t)
    return out


def cell_boxes(decoded: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Centre-form boxes (cx, cy, w, h) in image fractions for a decoded grid."""
    S = grid.S
    cols = np.arange(S).reshape(1, S, 1)
    rows = np.arange(S).reshape(S, 1, 1)
    boxes = np.empty(decoded.shape[:-1] + (4,))
    boxes[..., 0] = (decoded[..., X] + cols) / S
    boxes[..., 1] = (decoded[..., Y] + rows) / S
    boxes[..., 2] = decoded[..., W]
    boxes[..., 3] = decoded[..., H]
    return boxes


def detections_from_decoded(decoded: np.ndarray, grid: GridSpec) -> list[Detection]:
    """One Detection per anchor, in row, col, anchor order."""
    if decoded.shape != grid.shape:
        raise ValueError(f"decoded grid shape {decoded.shape} does not match {grid.shape}")
    boxes = cell_boxes(decoded, grid).reshape(-1, 4)
    flat = decoded.reshape(-1, grid.channels)
    return [
        Detection(Box(*map(float, b)), float(row[CONF]), tuple(map(float, row[N_BOX_CHANNELS:])))
        for b, row in zip(boxes, flat)
    ]


def decode_grid(raw: np.ndarray, grid: GridSpec) -> list[Detection]:
    return detections_from_decoded(activate(raw, grid), grid)


def _shape_iou(w1, h1, w2, h2) -> float:
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def assign_responsibility(
    ground_truth: Sequence[tuple[Box, int]], grid: GridSpec
) -> tuple[ResponsibilityMask, Targets]:
    """Give every ground-truth object one responsible (cell, anchor).

    The cell is the one containing the box centre. Inside it, anchors are
    ranked by shape IoU against the box (lowest index wins ties); an object
    whose ranked anchors are all taken is dropped and counted.
    """
    S, B = grid.S, grid.B
    obj = np.zeros((S, S, B), dtype=bool)
    box_t = np.zeros((S, S, B, 4))
    cls_t = np.full((S, S, B), -1, dtype=np.int64)
    dropped = 0
    for box, label in ground_truth:
        col = min(int(box.cx * S), S - 1)
        row = min(int(box.cy * S), S - 1)
        ious = [_shape_iou(box.w, box.h, aw, ah) for aw, ah in grid.anchor_sizes]
        # stable sort on -iou keeps the lowest index first among equals
        ranked = sorted(range(B), key=lambda j: -ious[j])
        free = [j for j in ranked if not obj[row, col, j]]
        if not free:
            dropped += 1
            continue
        j = free[0]
        obj[row, col, j] = True
        box_t[row, col, j] = (box.cx * S - col, box.cy * S - row, box.w, box.h)
        cls_t[row, col, j] = label
    return ResponsibilityMask(obj, ~obj), Targets(box_t, cls_t, dropped)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Per-class greedy suppression; survivors come back sorted by score."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    boxes = np.array([[d.box.cx, d.box.cy, d.box.w, d.box.h] for d in dets])[order]
    classes = np.array([d.class_id for d in dets])[order]
    clash = (boxes_iou_matrix(boxes, boxes) > iou_thresh) & (classes[:, None] == classes[None, :])
    alive = np.ones(len(dets), dtype=bool)
    keep = []
    for i in range(len(dets)):
        if alive[i]:
            keep.append(order[i])
            alive &= ~clash[i]
    return [dets[i] for i in keep]


def boxes_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (n, 4) / (m, 4) centre-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a1, a2 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b1, b2 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a1[:, None], b1[None])
    hi = np.minimum(a2[:, None], b2[None])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return inter / union


def pixel_iou(a: Box, b: Box, resolution: int = 1000) -> float:
    """Rasterised IoU, used as an independent check on :func:`iou`."""
    def raster(box):
        x1, y1, x2, y2 = (math.floor(c * resolution + 0.5) for c in box.corners())
        m = np.zeros((resolution, resolution), dtype=bool)
        m[max(y1, 0):max(y2, 0), max(x1, 0):max(x2, 0)] = True
        return m

    ma, mb = raster(a), raster(b)
    union = np.logical_or(ma, mb).sum()
    return float(np.logical_and(ma, mb).sum() / union) if union else 0.0
