"""Normalized bounding-box algebra.

Boxes live in normalized center-size form ``(cx, cy, w, h)``; the corner form
``(x1, y1, x2, y2)`` is only ever a derived view. The tensor functions work on
the trailing dimension of shape ``(..., 4)`` and pair boxes elementwise, so the
same code serves the losses (autograd, raw head outputs) and evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch

MIN_EXTENT = 1e-6


class BoxValidationError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        fields = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in fields):
            raise BoxValidationError(f"non-finite box field in {fields}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise BoxValidationError(f"center out of [0, 1]: {fields}")
        if not (MIN_EXTENT <= self.w <= 1.0 and MIN_EXTENT <= self.h <= 1.0):
            raise BoxValidationError(f"extent out of [{MIN_EXTENT}, 1]: {fields}")

    def to_corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "BoundingBox":
        cx, cy, w, h = (float(v) for v in t.detach().reshape(4).tolist())
        return cls(cx, cy, w, h)

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor([self.cx, self.cy, self.w, self.h], dtype=dtype)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    def area(self) -> float:
        return self.w * self.h


BoxLike = Union[BoundingBox, torch.Tensor]


def to_corners(b: BoxLike):
    if isinstance(b, BoundingBox):
        return b.to_corners()
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def from_corners(c):
    if isinstance(c, torch.Tensor):
        x1, y1, x2, y2 = c.unbind(-1)
        return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)
    return BoundingBox.from_corners(*c)


def clamp_box(b: BoxLike) -> BoxLike:
    """Clip a box to the unit square, keeping at least ``MIN_EXTENT`` per side.

    Used for prompting and evaluation only, never inside a loss.
    """
    if isinstance(b, BoundingBox):
        return BoundingBox.from_tensor(clamp_box(b.as_tensor()))
    c = to_corners(b.detach().to(torch.float64)).clamp(0.0, 1.0)
    x1, y1, x2, y2 = c.unbind(-1)
    x1 = torch.minimum(x1, torch.full_like(x1, 1.0 - MIN_EXTENT))
    y1 = torch.minimum(y1, torch.full_like(y1, 1.0 - MIN_EXTENT))
    x2 = torch.maximum(x2, x1 + MIN_EXTENT)
    y2 = torch.maximum(y2, y1 + MIN_EXTENT)
    return from_corners(torch.stack([x1, y1, x2, y2], dim=-1))


def _as_tensors(a: BoxLike, b: BoxLike):
    scalar = isinstance(a, BoundingBox) and isinstance(b, BoundingBox)
    if isinstance(a, BoundingBox):
        a = a.as_tensor()
    if isinstance(b, BoundingBox):
        b = b.as_tensor()
    return a, b, scalar


def _areas(a: torch.Tensor, b: torch.Tensor):
    ca, cb = to_corners(a), to_corners(b)
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    lt = torch.maximum(ca[..., :2], cb[..., :2])
    rb = torch.minimum(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    elt = torch.minimum(ca[..., :2], cb[..., :2])
    erb = torch.maximum(ca[..., 2:], cb[..., 2:])
    ewh = erb - elt
    enclosing = ewh[..., 0] * ewh[..., 1]
    return inter, union, enclosing


def iou(a: BoxLike, b: BoxLike):
    """Elementwise IoU of paired boxes in cxcywh form."""
    a, b, scalar = _as_tensors(a, b)
    inter, union, _ = _areas(a, b)
    out = inter / union
    return float(out) if scalar else out


def generalized_iou(a: BoxLike, b: BoxLike):
    """Elementwise generalized IoU, in (-1, 1]."""
    a, b, scalar = _as_tensors(a, b)
    inter, union, enclosing = _areas(a, b)
    if bool((enclosing <= 0).any()):
        raise ArithmeticError("degenerate enclosing box")
    out = inter / union - (enclosing - union) / enclosing
    return float(out) if scalar else out


def giou_loss(pred: BoxLike, gt: BoxLike):
    """``1 - GIoU``; differentiable in ``pred`` wherever both boxes have area."""
    g = generalized_iou(pred, gt)
    return 1.0 - g
