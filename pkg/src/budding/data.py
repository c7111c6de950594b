"""Synthetic shape scenes standing in for a real detection dataset.

In-distribution images hold 1-3 filled shapes (circle, square, triangle) on a
noisy shaded background. Near-OOD images use unseen shapes (cross, ring) on
the same backgrounds; far-OOD images are shape-free textures.

Every image is drawn from its own generator seeded by ``(seed, mode, index)``
so any subset can be regenerated independently and in any order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Box, iou

OOD_MODES = ("none", "near", "far")
NEAR_OOD_SHAPES = ("cross", "ring")


@dataclass
class SceneSpec:
    image_size: int = 64
    shape_classes: tuple[str, ...] = ("circle", "square", "triangle")
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.12, 0.34)
    noise_std: float = 0.04
    ood_mode: str = "none"

    def __post_init__(self):
        self.shape_classes = tuple(self.shape_classes)
        self.objects_per_image = tuple(self.objects_per_image)
        self.size_range = tuple(self.size_range)
        if self.ood_mode not in OOD_MODES:
            raise ValueError(f"ood_mode must be one of {OOD_MODES}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError("objects_per_image must be a range with 1 <= lo <= hi")

    def to_dict(self) -> dict:
        return asdict(self)


def _shape_mask(kind: str, xx, yy, cx, cy, r) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "triangle":
        # apex up, base on the bottom edge of the bounding square
        t = (dy + r) / (2 * r)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= t * r)
    if kind == "cross":
        arm = r / 3
        box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if kind == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.45, size=3)
    ramp = np.linspace(-1.0, 1.0, size)
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    shade = gx * ramp[None, :] + gy * ramp[:, None]
    return base[:, None, None] + shade[None]


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Gratings plus blocky noise: structured, but no object-like blobs."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((3, size, size))
    for _ in range(rng.integers(2, 5)):
        f = rng.uniform(2.0, 12.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += rng.uniform(0.05, 0.25, size=3)[:, None, None] * wave[None]
    block = int(rng.choice([4, 8, 16]))
    coarse = rng.uniform(-0.2, 0.2, size=(3, size // block, size // block))
    img += np.kron(coarse, np.ones((1, block, block)))
    return img + rng.uniform(0.3, 0.6, size=3)[:, None, None]


def _colour(rng: np.random.Generator, bg: np.ndarray) -> np.ndarray:
    for _ in range(20):
        c = rng.uniform(0.0, 1.0, size=3)
        if np.abs(c - bg).mean() > 0.3:
            return c
    return 1.0 - bg


def _overlaps(box: Box, placed: list[Box]) -> bool:
    return any(iou(box, p) > 0.1 for p in placed)


def render_scene(spec: SceneSpec, rng: np.random.Generator):
    """Draw one image; returns ``(image CxHxW float32, [(Box, class_id), ...])``."""
    size = spec.image_size
    if spec.ood_mode == "far":
        img = _texture(rng, size)
        img += rng.normal(0.0, spec.noise_std, size=img.shape)
        return np.clip(img, 0.0, 1.0).astype(np.float32), []

    img = _background(rng, size)
    bg_mean = img.mean(axis=(1, 2))
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    shapes = NEAR_OOD_SHAPES if spec.ood_mode == "near" else spec.shape_classes
    gts: list[tuple[Box, int]] = []
    placed: list[Box] = []
    for _ in range(n_obj):
        for _attempt in range(30):
            side = rng.uniform(*spec.size_range)
            # snap to whole pixels so the GT box is the drawn extent
            side = max(4, round(side * size)) / size
            r = side / 2
            cx = rng.uniform(r, 1 - r)
            cy = rng.uniform(r, 1 - r)
            box = Box(cx, cy, side, side)
            if not _overlaps(box, placed):
                break
        else:
            continue
        label = int(rng.integers(len(shapes)))
        mask = _shape_mask(shapes[label], xx, yy, cx, cy, r)
        img[:, mask] = _colour(rng, bg_mean)[:, None]
        placed.append(box)
        if spec.ood_mode == "none":
            gts.append((box, label))
    img += rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), gts


def item_rng(seed: int, mode: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), OOD_MODES.index(mode), int(index)]))


def generate_dataset(spec: SceneSpec, n: int, seed: int):
    if n < 1:
        raise ValueError("n must be at least 1")
    return [render_scene(spec, item_rng(seed, spec.ood_mode, i)) for i in range(n)]


def stack_images(samples) -> np.ndarray:
    return np.stack([img for img, _ in samples])
