"""A small single-scale anchor detector with optional duplicated heads.

With ``bea=True`` one backbone feeds two identically shaped heads (alpha and
beta) initialised independently; with ``bea=False`` there is a single head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CONF, H, MIN_SIZE, N_BOX_CHANNELS, W, X, Y, GridSpec, Targets, assign_responsibility
from .tandem import TandemOutput

CONF_PRIOR_LOGIT = -4.0


@dataclass
class ModelConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    image_size: int = 64
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    head_channels: int = 64
    bea: bool = True

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        self.backbone_channels = tuple(self.backbone_channels)
        stride = 2 ** len(self.backbone_channels)
        if self.image_size % stride or self.image_size // stride != self.grid.S:
            raise ValueError(
                f"image_size {self.image_size} with {len(self.backbone_channels)} stride-2 stages "
                f"does not produce an {self.grid.S}x{self.grid.S} grid"
            )


class DetectorHead(nn.Module):
    def __init__(self, in_channels: int, hidden: int, grid: GridSpec):
        super().__init__()
        self.grid = grid
        self.hidden = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.act = nn.LeakyReLU(0.1)
        self.out = nn.Conv2d(hidden, grid.B * grid.channels, 1)
        with torch.no_grad():
            bias = self.out.bias.view(grid.B, grid.channels)
            bias.zero_()
            bias[:, CONF] = CONF_PRIOR_LOGIT

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.hidden(feats)
        raw = self.out(self.act(h))
        n, _, s, _ = raw.shape
        raw = raw.permute(0, 2, 3, 1).reshape(n, s, s, self.grid.B, self.grid.channels)
        return raw, h


class BuddingDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        layers, c_in = [], 3
        for c in cfg.backbone_channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.BatchNorm2d(c), nn.LeakyReLU(0.1)]
            c_in = c
        self.backbone = nn.Sequential(*layers)
        n_heads = 2 if cfg.bea else 1
        self.heads = nn.ModuleList(DetectorHead(c_in, cfg.head_channels, cfg.grid) for _ in range(n_heads))
        priors = torch.tensor(cfg.grid.anchor_sizes, dtype=torch.float32)
        self.register_buffer("priors", priors, persistent=False)

    @property
    def grid(self) -> GridSpec:
        return self.cfg.grid

    def forward(self, images: torch.Tensor) -> dict:
        """Raw activations, decoded grids and head hidden maps, one entry per head."""
        size = self.cfg.image_size
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != (size, size):
            raise ValueError(f"expected images of shape (N, 3, {size}, {size}), got {tuple(images.shape)}")
        feats = self.backbone(images)
        raws, hiddens = zip(*(head(feats) for head in self.heads))
        decoded = [activate(r, self.priors.to(r.dtype)) for r in raws]
        return {"raw": list(raws), "decoded": decoded, "hidden": list(hiddens), "features": feats}


def activate(raw: torch.Tensor, priors: torch.Tensor) -> torch.Tensor:
    """Torch twin of :func:`budding.geometry.activate` (differentiable)."""
    out = torch.sigmoid(raw)
    lo = torch.log(MIN_SIZE / priors)
    hi = torch.log(1.0 / priors)
    w = priors[:, 0] * torch.exp(torch.minimum(torch.maximum(raw[..., W], lo[:, 0]), hi[:, 0]))
    h = priors[:, 1] * torch.exp(torch.minimum(torch.maximum(raw[..., H], lo[:, 1]), hi[:, 1]))
    return torch.cat([out[..., :W], w.unsqueeze(-1), h.unsqueeze(-1), out[..., CONF:]], dim=-1)


def build_model(cfg: ModelConfig, seed: int = 0) -> BuddingDetector:
    torch.manual_seed(seed)
    return BuddingDetector(cfg)


def forward_bea(images, model: BuddingDetector):
    """Decoded predictions: a TandemOutput for a budding model, a tensor otherwise."""
    images = torch.as_tensor(images)
    decoded = model(images)["decoded"]
    if len(decoded) == 2:
        return TandemOutput(decoded[0], decoded[1])
    return decoded[0]


@dataclass
class BatchTargets:
    obj: torch.Tensor
    noobj: torch.Tensor
    box: torch.Tensor
    cls: torch.Tensor
    dropped: int = 0

    def select(self, idx) -> BatchTargets:
        # dropped counts stay dataset-wide
        return BatchTargets(self.obj[idx], self.noobj[idx], self.box[idx], self.cls[idx], self.dropped)


def build_targets(ground_truths, grid: GridSpec, dtype=torch.float32) -> BatchTargets:
    """Stack per-image anchor assignments into batch tensors."""
    masks, targets = zip(*(assign_responsibility(gt, grid) for gt in ground_truths))
    return BatchTargets(
        obj=torch.from_numpy(np.stack([m.obj for m in masks])),
        noobj=torch.from_numpy(np.stack([m.noobj for m in masks])),
        box=torch.from_numpy(np.stack([t.box for t in targets])).to(dtype),
        cls=torch.from_numpy(np.stack([t.cls for t in targets])),
        dropped=sum(t.dropped for t in targets),
    )


def targets_from_single(mask, targets: Targets, dtype=torch.float64) -> BatchTargets:
    return BatchTargets(
        obj=torch.as_tensor(mask.obj)[None],
        noobj=torch.as_tensor(mask.noobj)[None],
        box=torch.as_tensor(targets.box, dtype=dtype)[None],
        cls=torch.as_tensor(targets.cls)[None],
        dropped=targets.dropped,
    )


BOX_WEIGHT = 5.0


def conventional_loss(
    pred: torch.Tensor, targets: BatchTargets, grid: GridSpec, box_weight: float = BOX_WEIGHT, logits=None
):
    """YOLO-style loss for one head, summed over anchors and averaged over images.

    Responsible anchors: weighted squared error on the box (offsets and sizes in
    grid-cell units), BCE on confidence toward 1 and per-class BCE toward the
    one-hot label. Other anchors: BCE on confidence toward 0.

    Passing the raw activations as ``logits`` evaluates the BCE terms from
    logits. Values match the probability form; gradients survive saturation.
    """
    if pred.dim() == 4:
        pred = pred.unsqueeze(0)
        logits = logits.unsqueeze(0) if logits is not None else None
    if logits is None:
        bce = F.binary_cross_entropy
        scores = pred
    else:
        bce = F.binary_cross_entropy_with_logits
        scores = logits
    n = pred.shape[0]
    obj, noobj = targets.obj.to(pred.device), targets.noobj.to(pred.device)
    S = grid.S
    loss = pred.new_zeros(())
    if obj.any():
        p = pred[obj]
        s = scores[obj]
        t = targets.box.to(pred)[obj]
        box_err = (p[:, X] - t[:, 0]) ** 2 + (p[:, Y] - t[:, 1]) ** 2
        box_err = box_err + (S * (p[:, W] - t[:, 2])) ** 2 + (S * (p[:, H] - t[:, 3])) ** 2
        onehot = F.one_hot(targets.cls[obj].to(pred.device), grid.K).to(pred)
        loss = loss + box_weight * box_err.sum()
        loss = loss + bce(s[:, CONF], torch.ones_like(s[:, CONF]), reduction="sum")
        loss = loss + bce(s[:, N_BOX_CHANNELS:], onehot, reduction="sum")
    if noobj.any():
        c = scores[noobj][:, CONF]
        loss = loss + bce(c, torch.zeros_like(c), reduction="sum")
    return loss / n
