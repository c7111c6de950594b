"""Merge tandem predictions into one detection set per image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import CONF, GridSpec, Detection, detections_from_decoded, nms
from .metrics import u_ood_image, u_ood_single

CONF_FLOOR = 0.05
NMS_THRESH = 0.5


@dataclass
class ImagePrediction:
    image_id: str
    detections: list[Detection]
    u_ood: float


def aggregate_grids(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Average the box channels, keep the larger confidence and class scores."""
    merged = np.empty_like(alpha)
    merged[..., :CONF] = (alpha[..., :CONF] + beta[..., :CONF]) / 2
    merged[..., CONF:] = np.maximum(alpha[..., CONF:], beta[..., CONF:])
    return merged


def _filtered(decoded: np.ndarray, grid: GridSpec, conf_floor: float, nms_thresh: float) -> list[Detection]:
    dets = [d for d in detections_from_decoded(decoded, grid) if d.confidence >= conf_floor]
    return nms(dets, nms_thresh)


def aggregate_and_predict(out, grid: GridSpec, conf_floor: float = CONF_FLOOR, nms_thresh: float = NMS_THRESH):
    """Detections and image OOD score for one image.

    ``out`` is a ``(alpha, beta)`` pair / TandemOutput of decoded grids, or a
    single decoded grid for a one-head model. The OOD score is taken from the
    raw pair before the heads are merged.
    """
    if hasattr(out, "alpha") or isinstance(out, tuple):
        alpha, beta = (out.alpha, out.beta) if hasattr(out, "alpha") else out
        alpha, beta = _np(alpha), _np(beta)
        u = u_ood_image((alpha, beta))
        merged = aggregate_grids(alpha, beta)
    else:
        merged = _np(out)
        u = u_ood_single(merged)
    return _filtered(merged, grid, conf_floor, nms_thresh), u


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


@torch.no_grad()
def predict_decoded(model, images: np.ndarray, batch_size: int = 128) -> list[np.ndarray]:
    """Decoded grids per head, each of shape (N, S, S, B, C), in float64."""
    model.eval()
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size]))
        chunks.append([_np(d) for d in model(batch)["decoded"]])
    return [np.concatenate(parts) for parts in zip(*chunks)]


def predict(model, images: np.ndarray, image_ids, conf_floor: float = CONF_FLOOR,
            nms_thresh: float = NMS_THRESH, head: int | None = None) -> list[ImagePrediction]:
    """Run the detector over ``images``.

    ``head`` picks a single head of a budding model (0 = alpha, 1 = beta)
    instead of the merged output; the OOD score then falls back to the
    single-head rule.
    """
    grids = predict_decoded(model, images)
    grid = model.grid
    out = []
    for i, image_id in enumerate(image_ids):
        if head is not None:
            pair = grids[head][i]
        elif len(grids) == 2:
            pair = (grids[0][i], grids[1][i])
        else:
            pair = grids[0][i]
        dets, u = aggregate_and_predict(pair, grid, conf_floor, nms_thresh)
        out.append(ImagePrediction(str(image_id), dets, u))
    return out
