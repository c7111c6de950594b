"""Tandem losses between the two detector heads of a budding ensemble.

Both heads (``alpha`` and ``beta``) predict every anchor of the same grid.
On anchors responsible for an object the aiding term rewards agreement; on
all other anchors the quelling term rewards disagreement.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .geometry import CONF, N_BOX_CHANNELS

CHANNEL_NAMES = ("x", "y", "w", "h", "conf")


@dataclass
class LossWeights:
    w_conv: float = 1.0
    w_tandem: float = 1.0
    w_diversity: float = 0.0
    enable_ta: bool = True
    enable_tq: bool = True
    eps_tq: float = 1e-3
    reduction: str = "mean"
    include_class_channels: bool = True

    def __post_init__(self):
        if min(self.w_conv, self.w_tandem, self.w_diversity) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps_tq <= 0:
            raise ValueError("eps_tq must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TandemOutput:
    alpha: torch.Tensor
    beta: torch.Tensor

    def __post_init__(self):
        self.alpha = torch.as_tensor(self.alpha)
        self.beta = torch.as_tensor(self.beta)
        if self.alpha.shape != self.beta.shape:
            raise ValueError(f"tandem shapes differ: {tuple(self.alpha.shape)} vs {tuple(self.beta.shape)}")


def _mask(m, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(m) if not isinstance(m, torch.Tensor) else m, device=like.device).bool()


def _reduce(values: torch.Tensor, mask: torch.Tensor, reduction: str) -> torch.Tensor:
    if not mask.any():
        return values.sum() * 0.0
    picked = values[mask]
    return picked.mean() if reduction == "mean" else picked.sum()


def channel_tq(alpha_ch, beta_ch, mask, eps: float = 1e-3, reduction: str = "mean") -> torch.Tensor:
    """Quelling term for one channel: ``2 / sqrt((a - b)^2 + eps)`` on noobj anchors."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    alpha_ch, beta_ch = torch.as_tensor(alpha_ch), torch.as_tensor(beta_ch)
    noobj = _mask(mask.noobj, alpha_ch)
    per_anchor = 2.0 / torch.sqrt((alpha_ch - beta_ch) ** 2 + eps)
    return _reduce(per_anchor, noobj, reduction)


def channel_ta(alpha_ch, beta_ch, mask, reduction: str = "mean") -> torch.Tensor:
    """Aiding term for one channel: ``|a - b| / 2`` on obj anchors."""
    alpha_ch, beta_ch = torch.as_tensor(alpha_ch), torch.as_tensor(beta_ch)
    obj = _mask(mask.obj, alpha_ch)
    # abs rather than sqrt(d**2): same value, finite subgradient at d == 0
    per_anchor = torch.abs(alpha_ch - beta_ch) / 2.0
    return _reduce(per_anchor, obj, reduction)


def tandem_channels(n_channels: int, include_class_channels: bool = False) -> list[int]:
    return list(range(n_channels)) if include_class_channels else list(range(N_BOX_CHANNELS))


def tandem_loss(out: TandemOutput, mask, weights: LossWeights | None = None):
    """Sum of the aiding and quelling terms over the tandem channels.

    Returns ``(total, parts)`` where ``parts`` holds the per-channel tensors
    under ``"ta"`` and ``"tq"`` plus their sums ``"L_ta"`` and ``"L_tq"``.
    Terms whose switch is off are still reported but left out of ``total``.
    """
    weights = weights or LossWeights()
    names = list(CHANNEL_NAMES) + [f"cls{k}" for k in range(out.alpha.shape[-1] - N_BOX_CHANNELS)]
    ta, tq = {}, {}
    for c in tandem_channels(out.alpha.shape[-1], weights.include_class_channels):
        a, b = out.alpha[..., c], out.beta[..., c]
        ta[names[c]] = channel_ta(a, b, mask, weights.reduction)
        tq[names[c]] = channel_tq(a, b, mask, weights.eps_tq, weights.reduction)
    l_ta = sum(ta.values())
    l_tq = sum(tq.values())
    total = out.alpha.new_zeros(())
    if weights.enable_ta:
        total = total + l_ta
    if weights.enable_tq:
        total = total + l_tq
    return total, {"ta": ta, "tq": tq, "L_ta": l_ta, "L_tq": l_tq}


def bea_loss(conv, tandem, div, weights: LossWeights | None = None):
    weights = weights or LossWeights()
    return weights.w_conv * conv + weights.w_tandem * tandem + weights.w_diversity * div


@torch.no_grad()
def tandem_monitor(out: TandemOutput, mask, eps: float = 1e-3) -> dict[str, float]:
    """Confidence-channel tandem terms and the element-averaged alpha/beta MSE."""
    a, b = out.alpha[..., CONF], out.beta[..., CONF]
    return {
        "L_ta_conf": float(channel_ta(a, b, mask)),
        "L_tq_conf": float(channel_tq(a, b, mask, eps)),
        "mse_alpha_beta": float(((out.alpha - out.beta) ** 2).mean()),
    }
