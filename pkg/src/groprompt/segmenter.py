"""Frozen segmentation side: prompt encoder, image encoder, video pooling, adapters.

Nothing in this module is ever handed to an optimizer. The prompt encoder is
differentiable in the box coordinates so losses computed on prompt embeddings
still shape the proposals that produced them.
"""
from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np
import torch
from torch import nn

from .geometry import BoundingBox, iou, to_corners


@dataclass
class SegmenterConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    text_dim: int = 64
    num_freqs: int = 8
    seed: int = 8675309


class FrozenSegmenter(nn.Module):
    def __init__(self, cfg: Optional[SegmenterConfig] = None):
        super().__init__()
        cfg = cfg or SegmenterConfig()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        # one row of frequencies per corner coordinate (x1, y1, x2, y2)
        self.freqs = nn.Parameter(torch.randn(4, cfg.num_freqs, generator=g), requires_grad=False)
        n_in = 4 * cfg.num_freqs * 2
        self.prompt_proj = nn.Parameter(torch.randn(n_in, cfg.dim, generator=g) / math.sqrt(n_in),
                                        requires_grad=False)
        self.image_proj = nn.Conv2d(3, cfg.dim, cfg.patch, stride=cfg.patch)
        with torch.no_grad():
            fan_in = 3 * cfg.patch * cfg.patch
            self.image_proj.weight.copy_(
                torch.randn(self.image_proj.weight.shape, generator=g) / math.sqrt(fan_in))
            self.image_proj.bias.zero_()
        self.sentence_proj = nn.Parameter(
            torch.randn(cfg.text_dim, cfg.dim, generator=g) / math.sqrt(cfg.text_dim),
            requires_grad=False)
        for p in self.parameters():
            p.requires_grad_(False)

    def _fourier(self, corners: torch.Tensor) -> torch.Tensor:
        c = 2.0 * corners - 1.0
        freqs = self.freqs.to(c.dtype)
        ang = 2.0 * math.pi * c.unsqueeze(-1) * freqs  # (..., 4, F)
        feats = torch.cat([ang.sin(), ang.cos()], dim=-1)
        return feats.flatten(-2)

    def prompt_encode(self, boxes) -> torch.Tensor:
        """Box(es) in cxcywh -> prompt embedding(s) of dimension ``dim``."""
        if isinstance(boxes, BoundingBox):
            boxes = boxes.as_tensor()
        boxes = torch.as_tensor(boxes)
        if boxes.shape[-1] != 4 or not bool(torch.isfinite(boxes).all()):
            raise ValueError("prompt boxes must be finite (..., 4) cxcywh tensors")
        return self._fourier(to_corners(boxes)) @ self.prompt_proj.to(boxes.dtype)

    def dense_positions(self, dtype=torch.float32) -> torch.Tensor:
        grid = self.cfg.image_size // self.cfg.patch
        centers = (torch.arange(grid, dtype=torch.float64) + 0.5) / grid
        ys, xs = torch.meshgrid(centers, centers, indexing="ij")
        pts = torch.stack([xs, ys, xs, ys], dim=-1).reshape(-1, 4)
        return (self._fourier(pts) @ self.prompt_proj.double()).to(dtype)

    def frozen_image_encode(self, frames, dtype=torch.float32) -> torch.Tensor:
        """(B, H, W, 3) uint8 frames -> (B, N_v, dim) features."""
        x = torch.as_tensor(np.asarray(frames))
        if x.dim() == 3:
            x = x.unsqueeze(0)
        n = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (n, n, 3):
            raise ValueError(f"expected frames of shape (B, {n}, {n}, 3), got {tuple(x.shape)}")
        x = (x.to(dtype) / 255.0 - 0.5).permute(0, 3, 1, 2)
        w = self.image_proj.weight.to(dtype)
        b = self.image_proj.bias.to(dtype)
        feats = torch.nn.functional.conv2d(x, w, b, stride=self.cfg.patch)
        return feats.flatten(2).transpose(1, 2) + self.dense_positions(dtype)

    def sentence_feature(self, z: torch.Tensor) -> torch.Tensor:
        return z @ self.sentence_proj.to(z.dtype)


def aggregate_video_feature(prompts: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """Attend from each frame's prompt over that frame's features, then average over frames.

    ``prompts``: (T, D); ``feats``: (T, N, D). No learned projections.
    """
    if prompts.dim() != 2 or feats.dim() != 3 or prompts.shape[0] != feats.shape[0]:
        raise ValueError(f"length mismatch: prompts {tuple(prompts.shape)}, feats {tuple(feats.shape)}")
    if prompts.shape[0] < 1:
        raise ValueError("need at least one frame")
    d = prompts.shape[-1]
    scores = torch.einsum("td,tnd->tn", prompts, feats) / math.sqrt(d)
    attn = torch.softmax(scores, dim=-1)
    per_frame = torch.einsum("tn,tnd->td", attn, feats)
    return per_frame.mean(0)


def oracle_segment(gt_boxes, gt_masks: np.ndarray, prompt) -> np.ndarray:
    """GT mask of the object whose GT box best overlaps the prompt; empty if none does."""
    gt_masks = np.asarray(gt_masks)
    if isinstance(prompt, BoundingBox):
        prompt = prompt.as_tensor()
    prompt = torch.as_tensor(prompt, dtype=torch.float64)
    boxes = torch.as_tensor(np.asarray(gt_boxes), dtype=torch.float64).reshape(-1, 4)
    empty = np.zeros(gt_masks.shape[-2:], dtype=bool)
    if boxes.shape[0] == 0:
        return empty
    ious = iou(boxes, prompt.expand_as(boxes))
    k = int(torch.argmax(ious))
    if float(ious[k]) <= 0.0:
        return empty
    return gt_masks[k].astype(bool).copy()


class AdapterError(RuntimeError):
    def __init__(self, adapter: str, message: str, frame_index: Optional[int] = None):
        where = f" at frame {frame_index}" if frame_index is not None else ""
        super().__init__(f"adapter {adapter!r} failed{where}: {message}")
        self.adapter = adapter
        self.frame_index = frame_index


class SegmentAdapter(Protocol):
    name: str
    concurrency_safe: bool

    def segment(self, frame: np.ndarray, box: BoundingBox) -> np.ndarray:
        """Return an (H, W) soft mask in [0, 1] for an 8-bit RGB frame and a cxcywh box."""
        ...


def _frame_key(frame: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(frame).tobytes()).hexdigest()


class OracleAdapter:
    """Looks up the annotated objects of a frame and returns the best-matching GT mask."""

    name = "oracle"
    concurrency_safe = True

    def __init__(self, videos=()):
        self._scenes: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for v in videos:
            self.add_video(v)

    def add_video(self, video):
        for t in range(video.num_frames):
            self._scenes[_frame_key(video.frames[t])] = (video.gt_boxes[t], video.gt_masks[t])

    def segment(self, frame: np.ndarray, box: BoundingBox) -> np.ndarray:
        scene = self._scenes.get(_frame_key(frame))
        if scene is None:
            raise KeyError("frame has no annotated objects registered with the oracle")
        return oracle_segment(scene[0], scene[1], box).astype(np.float32)


ADAPTERS: dict[str, Callable[..., SegmentAdapter]] = {"oracle": OracleAdapter}


def register_adapter(name: str, factory: Callable[..., SegmentAdapter]):
    ADAPTERS[name] = factory


def get_adapter(name: str, **kwargs) -> SegmentAdapter:
    try:
        factory = ADAPTERS[name]
    except KeyError:
        raise KeyError(f"unknown adapter {name!r}; registered: {sorted(ADAPTERS)}") from None
    adapter = factory(**kwargs)
    if isinstance(adapter, nn.Module) and any(p.requires_grad for p in adapter.parameters()):
        raise ValueError(f"adapter {name!r} exposes trainable parameters")
    return adapter


class SerializedAdapter:
    """Guards an adapter that is not concurrency safe with a lock."""

    def __init__(self, adapter: SegmentAdapter):
        self.inner = adapter
        self.name = adapter.name
        self.concurrency_safe = True
        self._lock = threading.Lock()

    def segment(self, frame, box):
        with self._lock:
            return self.inner.segment(frame, box)


def run_adapter(adapter: SegmentAdapter, frame: np.ndarray, box: BoundingBox,
                frame_index: Optional[int] = None) -> np.ndarray:
    """Call an adapter, check its output, and binarize at 0.5."""
    try:
        soft = np.asarray(adapter.segment(frame, box), dtype=np.float64)
    except Exception as e:
        raise AdapterError(getattr(adapter, "name", type(adapter).__name__), str(e), frame_index) from e
    if soft.shape != frame.shape[:2]:
        raise AdapterError(adapter.name, f"mask shape {soft.shape} != frame {frame.shape[:2]}",
                           frame_index)
    return soft >= 0.5


def _rect_mask(n: int, box: BoundingBox) -> np.ndarray:
    x1, y1, x2, y2 = box.to_corners()
    c = (np.arange(n) + 0.5) / n
    return ((c >= y1) & (c < y2))[:, None] & ((c >= x1) & (c < x2))[None, :]


class _ConformanceVideo:
    def __init__(self, frame, boxes, masks):
        self.frames = frame[None]
        self.gt_boxes = np.asarray(boxes, dtype=np.float64)[None]
        self.gt_masks = np.asarray(masks)[None]
        self.num_frames = 1


def conformance_cases(n: int = 64):
    """Scenes for checking a segmentation adapter against the oracle.

    Yields ``(video, prompt, expected_mask)`` triples: a prompt equal to an
    object's box, a prompt disjoint from every object, and a prompt that
    overlaps two objects with IoUs of 0.6 and 0.3.
    """
    a = BoundingBox.from_corners(0.1, 0.1, 0.5, 0.5)
    b = BoundingBox.from_corners(0.5, 0.1, 0.9, 0.5)
    masks = np.stack([_rect_mask(n, a), _rect_mask(n, b)])
    frame = np.full((n, n, 3), 30, dtype=np.uint8)
    frame[masks[0]] = (220, 40, 40)
    frame[masks[1]] = (40, 200, 60)
    video = _ConformanceVideo(frame, [a.as_list(), b.as_list()], masks)
    # left edge x1 solves (0.5 - x1) / (x2 - 0.1) = 0.6 and (x2 - 0.5) / (0.9 - x1) = 0.3
    x1 = 0.098 / 0.82
    x2 = 0.77 - 0.3 * x1
    two = BoundingBox.from_corners(x1, 0.1, x2, 0.5)
    yield video, b, masks[1]
    yield video, BoundingBox.from_corners(0.2, 0.7, 0.4, 0.9), np.zeros((n, n), dtype=bool)
    yield video, two, masks[0]


def check_adapter_conformance(make_adapter: Callable[[object], SegmentAdapter],
                              min_iou: float = 0.5) -> list[float]:
    """Run the conformance scenes; ``make_adapter(video)`` builds an adapter for a scene.

    Returns the per-case mask IoU against the oracle output and raises
    ``AssertionError`` when any falls below ``min_iou``.
    """
    scores = []
    for video, prompt, expected in conformance_cases():
        adapter = make_adapter(video)
        got = run_adapter(adapter, video.frames[0], prompt)
        union = np.logical_or(got, expected).sum()
        score = 1.0 if union == 0 else np.logical_and(got, expected).sum() / union
        scores.append(float(score))
        if score < min_iou:
            raise AssertionError(f"adapter {adapter.name!r} scored IoU {score:.3f} on a conformance case")
    return scores
