"""Similarity scores between the two heads' feature maps.

Used as an optional diversity penalty: training minimises the similarity.
Inputs are ``N x D`` matrices (positions or examples by channels).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

KINDS = ("linear_cka", "cos_rows", "cos_cols", "cos_both")


@dataclass
class FeatureMap:
    values: np.ndarray | torch.Tensor
    source: Literal["alpha", "beta"] = "alpha"

    def __post_init__(self):
        shape = tuple(self.values.shape)
        if len(shape) != 2 or shape[0] < 2 or shape[1] < 1:
            raise ValueError(f"feature map must be N x D with N >= 2, got {shape}")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, FeatureMap):
        x = x.values
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.double()
    return torch.as_tensor(np.array(x, dtype=np.float64))


def linear_cka(x, y) -> torch.Tensor:
    x, y = _tensor(x), _tensor(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    xc = x - x.mean(dim=0, keepdim=True)
    yc = y - y.mean(dim=0, keepdim=True)
    cross = torch.linalg.matrix_norm(yc.T @ xc) ** 2
    nx = torch.linalg.matrix_norm(xc.T @ xc)
    ny = torch.linalg.matrix_norm(yc.T @ yc)
    denom = nx * ny
    if denom <= 0:
        # constant input has no centred variance
        return cross * 0.0
    return cross / denom


def _mean_cosine(x: torch.Tensor, y: torch.Tensor, dim: int) -> torch.Tensor:
    nx = torch.linalg.vector_norm(x, dim=dim)
    ny = torch.linalg.vector_norm(y, dim=dim)
    dot = (x * y).sum(dim=dim)
    ok = (nx > 0) & (ny > 0)
    safe = torch.where(ok, nx * ny, torch.ones_like(nx))
    return torch.where(ok, dot / safe, torch.zeros_like(dot)).mean()


def cosine_axis_similarity(x, y, axis: str = "cols") -> torch.Tensor:
    """Mean cosine between matching rows, matching columns, or the average of both."""
    x, y = _tensor(x), _tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if axis == "rows":
        return _mean_cosine(x, y, dim=1)
    if axis == "cols":
        return _mean_cosine(x, y, dim=0)
    if axis == "both":
        return (_mean_cosine(x, y, dim=1) + _mean_cosine(x, y, dim=0)) / 2
    raise ValueError(f"unknown axis {axis!r}")


def similarity(x, y, kind: str) -> torch.Tensor:
    if kind == "linear_cka":
        return linear_cka(x, y)
    if kind in ("cos_rows", "cos_cols", "cos_both"):
        return cosine_axis_similarity(x, y, kind[4:])
    raise ValueError(f"unknown diversity kind {kind!r}; expected one of {KINDS}")


def diversity_loss(x, y, kind: str = "linear_cka") -> torch.Tensor:
    return torch.clamp(similarity(x, y, kind), min=0.0)


def flatten_features(fmap: torch.Tensor) -> torch.Tensor:
    """(batch, C, H, W) conv output -> (batch*H*W, C)."""
    return fmap.permute(0, 2, 3, 1).reshape(-1, fmap.shape[1])
