"""Box loss, frame- and video-level triplet losses, and their combination."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .geometry import giou_loss, iou


@dataclass
class LossWeights:
    lambda_r: float = 5.0
    lambda_g: float = 2.0
    lambda_f: float = 0.01
    lambda_v: float = 0.1
    # confidence head supervision; not part of the published objective
    lambda_cls: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")


def box_loss(pred: torch.Tensor, gt: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Sum over frames of weighted L1 plus weighted GIoU loss. Shapes (T, 4)."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.shape[0] < 1:
        raise ValueError("need at least one frame")
    l1 = (pred - gt).abs().sum(-1)
    return (w.lambda_r * l1 + w.lambda_g * giou_loss(pred, gt)).sum()


def euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # zero gradient where a == b instead of NaN
    diff = a - b
    sq = (diff * diff).sum(-1)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def triplet(d_p, d_n, margin: float = 0.0):
    """``max(0, d_p - d_n + margin)`` with subgradient 0 at the kink."""
    d_p = torch.as_tensor(d_p, dtype=torch.float64) if not isinstance(d_p, torch.Tensor) else d_p
    d_n = torch.as_tensor(d_n, dtype=d_p.dtype) if not isinstance(d_n, torch.Tensor) else d_n
    return F.relu(d_p - d_n + margin)


def _prep(x: torch.Tensor, normalize: bool) -> torch.Tensor:
    x = x.reshape(x.shape[0], -1)
    return F.normalize(x, dim=-1) if normalize else x


def textcon_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
                 margin: float = 0.0, normalize: bool = False) -> torch.Tensor:
    """Frame-level triplet loss over per-frame prompt embeddings, summed over frames.

    Inputs have shape (T, ...); trailing dimensions are flattened.
    """
    if not (anchor.shape[0] == positive.shape[0] == negative.shape[0]):
        raise ValueError("anchor, positive and negative need the same number of frames")
    a, p, n = (_prep(x, normalize) for x in (anchor, positive, negative))
    return triplet(euclidean(a, p), euclidean(a, n), margin).sum()


def modalcon_loss(video_feature: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
                  margin: float = 0.0, normalize: bool = False) -> torch.Tensor:
    """Video-level triplet loss between a pooled video feature and two sentence features."""
    if not (video_feature.shape == positive.shape == negative.shape):
        raise ValueError(f"dimension mismatch: {tuple(video_feature.shape)}, "
                         f"{tuple(positive.shape)}, {tuple(negative.shape)}")
    f, zi, zj = video_feature, positive, negative
    if normalize:
        f, zi, zj = (F.normalize(x, dim=-1) for x in (f, zi, zj))
    return triplet(euclidean(f, zi), euclidean(f, zj), margin)


def confidence_targets(boxes: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """One-hot over queries marking the best-IoU proposal per frame (lowest index on ties)."""
    with torch.no_grad():
        ious = iou(boxes.detach().to(torch.float64), gt.to(torch.float64)[:, None, :])
        best = torch.argmax(ious, dim=-1)
    return F.one_hot(best, boxes.shape[-2]).to(boxes.dtype)


def confidence_loss(logits: torch.Tensor, boxes: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """BCE summed over queries and frames. Shapes (T, N_q), (T, N_q, 4), (T, 4)."""
    target = confidence_targets(boxes, torch.as_tensor(gt))
    return F.binary_cross_entropy_with_logits(logits, target, reduction="sum")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    box: torch.Tensor
    textcon: torch.Tensor
    modalcon: torch.Tensor
    cls: torch.Tensor
    weighted: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "L_box": self.box.item(), "L_cls": self.cls.item(),
            "L_f": self.textcon.item(), "L_v": self.modalcon.item(),
            "total": self.total.item(),
        }


def total_loss(box, textcon=0.0, modalcon=0.0, cls=0.0, w: Optional[LossWeights] = None) -> LossBreakdown:
    """``L_box + lambda_f * L_f + lambda_v * L_v``, plus the separately reported confidence term."""
    w = w or LossWeights()
    terms = [torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, torch.Tensor) else x
             for x in (box, textcon, modalcon, cls)]
    box, textcon, modalcon, cls = terms
    weighted = {
        "box": box,
        "textcon": w.lambda_f * textcon,
        "modalcon": w.lambda_v * modalcon,
        "cls": w.lambda_cls * cls,
    }
    total = weighted["box"] + weighted["textcon"] + weighted["modalcon"] + weighted["cls"]
    return LossBreakdown(total, box, textcon, modalcon, cls, weighted)
