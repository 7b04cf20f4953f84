"""Random affine augmentation: flips, rotation and translation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import seed_for

FACTORS = (1, 6, 12, 24, 48, 72)


@dataclass(frozen=True)
class AffineParams:
    flip_h: bool = False
    flip_v: bool = False
    rotation: float = 0.0  # degrees, counter-clockwise
    translate_x: float = 0.0  # fraction of width, positive moves content right
    translate_y: float = 0.0  # fraction of height, positive moves content down

    def is_identity(self) -> bool:
        return not (self.flip_h or self.flip_v or self.rotation or self.translate_x or self.translate_y)

    def to_dict(self) -> dict:
        return {"flip_h": self.flip_h, "flip_v": self.flip_v, "rotation": self.rotation,
                "translate_x": self.translate_x, "translate_y": self.translate_y}


@dataclass(frozen=True)
class AugmentConfig:
    factor: int = 1
    seed: int = 0
    max_rotation: float = 90.0
    max_translation: float = 0.1
    allow_any_factor: bool = False

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("augmentation factor must be >= 1")
        if self.factor not in FACTORS and not self.allow_any_factor:
            raise ValueError(f"augmentation factor {self.factor} not in {FACTORS}")


def sample_affine(rng: np.random.Generator, max_rotation: float = 90.0,
                  max_translation: float = 0.1) -> AffineParams:
    flips = rng.random(2) < 0.5
    rot, tx, ty = rng.uniform([-max_rotation, -max_translation, -max_translation],
                              [max_rotation, max_translation, max_translation])
    return AffineParams(bool(flips[0]), bool(flips[1]), float(rot), float(tx), float(ty))


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric: ... c b a | a b c ... | c b a ...
    idx = np.mod(idx, 2 * n)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.rint(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


def apply_affine(image: np.ndarray, params: AffineParams) -> np.ndarray:
    """Flip, then rotate about the centre, then translate; bilinear with reflect fill.

    Each output pixel is pulled back through the inverse transform, so the
    result always has the input's shape.
    """
    if params.is_identity():
        return image.copy()
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    # undo translation
    x = xx - params.translate_x * w
    y = yy - params.translate_y * h
    # undo rotation (counter-clockwise on screen, y axis pointing down)
    if params.rotation:
        t = math.radians(params.rotation)
        c, s = math.cos(t), math.sin(t)
        dx, dy = x - cx, y - cy
        x = cx + c * dx - s * dy
        y = cy + s * dx + c * dy
    # undo flips
    if params.flip_h:
        x = (w - 1) - x
    if params.flip_v:
        y = (h - 1) - y

    x, y = _snap(x), _snap(y)
    x0f, y0f = np.floor(x), np.floor(y)
    fx, fy = x - x0f, y - y0f
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    xa, xb = _reflect(x0, w), _reflect(x0 + 1, w)
    ya, yb = _reflect(y0, h), _reflect(y0 + 1, h)
    if image.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    img = image.astype(np.float64, copy=False)
    top = img[ya, xa] + fx * (img[ya, xb] - img[ya, xa])
    bot = img[yb, xa] + fx * (img[yb, xb] - img[yb, xa])
    out = top + fy * (bot - top)
    lo, hi = image.min(), image.max()
    return np.clip(out, lo, hi).astype(image.dtype)


def augment_dataset(records: Sequence, config: AugmentConfig) -> list[tuple[object, AffineParams | None]]:
    """Each record followed by ``factor - 1`` freshly sampled variants.

    Items are ``(record, params)`` with ``params`` None for the original.
    Variant ``v`` of record ``i`` draws from a stream seeded by
    ``(seed, i, v)``, so the list does not depend on evaluation order.
    """
    out = []
    for i, rec in enumerate(records):
        out.append((rec, None))
        for v in range(1, config.factor):
            rng = np.random.default_rng(seed_for(config.seed, "augment", i, v))
            out.append((rec, sample_affine(rng, config.max_rotation, config.max_translation)))
    return out
