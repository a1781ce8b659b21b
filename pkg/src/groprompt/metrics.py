"""RVOS evaluation: J, F, J&F, Precision@K, overall IoU and mean IoU."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
BOUNDARY_TOLERANCE = 0.008
PROTOCOLS = ("davis_style", "a2d_style")


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def intersection_union(pred, gt) -> tuple[int, int]:
    pred, gt = _pair(pred, gt)
    return int(np.logical_and(pred, gt).sum()), int(np.logical_or(pred, gt).sum())


def region_j(pred, gt) -> float:
    """Mask IoU; 1.0 when both masks are empty."""
    inter, union = intersection_union(pred, gt)
    return 1.0 if union == 0 else inter / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """One-pixel inner boundary; pixels on the image border count as boundary."""
    cross = ndimage.generate_binary_structure(2, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=cross, border_value=0)


def _disk(r: int) -> np.ndarray:
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def boundary_radius(shape, tolerance: float = BOUNDARY_TOLERANCE) -> int:
    return int(math.ceil(tolerance * math.hypot(*shape)))


def boundary_f(pred, gt, tolerance: float = BOUNDARY_TOLERANCE) -> float:
    """Boundary F-measure with a disk matching tolerance of ``tolerance * diagonal``."""
    pred, gt = _pair(pred, gt)
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    disk = _disk(boundary_radius(pred.shape, tolerance))
    gt_dil = ndimage.binary_dilation(bg, structure=disk)
    pred_dil = ndimage.binary_dilation(bp, structure=disk)
    precision = float((bp & gt_dil).sum()) / n_p
    recall = float((bg & pred_dil).sum()) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def precision_at_k(ious: Sequence[float], k: float) -> float:
    """Fraction of samples whose IoU is strictly above ``k``."""
    if len(ious) == 0:
        raise ValueError("precision@K of an empty IoU list")
    return float(np.mean(np.asarray(ious, dtype=np.float64) > k))


def overall_and_mean_iou(counts: Iterable[tuple[int, int]]) -> tuple[float, float]:
    counts = list(counts)
    if not counts:
        raise ValueError("no samples")
    total_i = sum(i for i, _ in counts)
    total_u = sum(u for _, u in counts)
    per = [1.0 if u == 0 else i / u for i, u in counts]
    overall = 1.0 if total_u == 0 else total_i / total_u
    return overall, float(np.mean(per))


@dataclass
class MetricsReport:
    protocol: str
    j_mean: float
    f_mean: float
    jf_mean: float
    precision_at: dict
    overall_iou: float
    mean_iou: float
    per_video: list = field(default_factory=list)
    per_frame: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    box_iou: float | None = None

    def to_dict(self, include_frames: bool = False) -> dict:
        d = asdict(self)
        d["precision_at"] = {f"{k:.1f}": v for k, v in self.precision_at.items()}
        if not include_frames:
            d.pop("per_frame")
        return d


def evaluate_dataset(predictions: Mapping, ground_truth: Mapping,
                     protocol: str = "davis_style") -> MetricsReport:
    """Score predicted masks keyed by ``(video, expression, frame)`` against GT.

    ``davis_style`` averages J and F per expression and then across
    expressions; ``a2d_style`` averages them over all annotated frames. P@K,
    overall IoU and mean IoU are always computed per annotated frame.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    missing = [k for k in ground_truth if k not in predictions]
    if missing:
        raise KeyError(f"missing predictions for {len(missing)} annotated frames, e.g. {sorted(missing)[:5]}")
    keys = sorted(ground_truth)
    if not keys:
        raise ValueError("empty ground truth")
    rows = []
    for key in keys:
        pred, gt = predictions[key], ground_truth[key]
        inter, union = intersection_union(pred, gt)
        rows.append({
            "video": key[0], "expression": key[1], "frame": key[2],
            "J": 1.0 if union == 0 else inter / union,
            "F": boundary_f(pred, gt),
            "intersection": inter, "union": union,
        })
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["video"], r["expression"]), []).append(r)
    per_video = [
        {"video": v, "expression": e, "frames": len(rs),
         "J": float(np.mean([r["J"] for r in rs])), "F": float(np.mean([r["F"] for r in rs]))}
        for (v, e), rs in sorted(groups.items())
    ]
    if protocol == "davis_style":
        j = float(np.mean([p["J"] for p in per_video]))
        f = float(np.mean([p["F"] for p in per_video]))
    else:
        j = float(np.mean([r["J"] for r in rows]))
        f = float(np.mean([r["F"] for r in rows]))
    ious = [r["J"] for r in rows]
    overall, mean = overall_and_mean_iou((r["intersection"], r["union"]) for r in rows)
    return MetricsReport(
        protocol=protocol, j_mean=j, f_mean=f, jf_mean=(j + f) / 2,
        precision_at={k: precision_at_k(ious, k) for k in THRESHOLDS},
        overall_iou=overall, mean_iou=mean, per_video=per_video, per_frame=rows,
        notes=["P@K counts IoU strictly greater than K; tools using >= can differ at ties",
               "P@K, overall IoU and mean IoU are computed per annotated frame"],
    )


def write_report(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=1))
    return path


def write_frame_csv(report: MetricsReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video", "expression", "frame", "J", "F"])
        for r in report.per_frame:
            w.writerow([r["video"], r["expression"], r["frame"], r["J"], r["F"]])
    return path


def load_prediction_dir(pred_dir, keys: Iterable[tuple]) -> dict:
    """Read ``<pred_dir>/<video>/<frame:05d>_<expression>.png`` for each key."""
    out = {}
    root = Path(pred_dir)
    for video, expr, frame in keys:
        path = root / video / f"{frame:05d}_{expr}.png"
        if not path.exists():
            continue
        with Image.open(path) as im:
            out[(video, expr, frame)] = np.array(im) > 127
    return out


def save_prediction_dir(predictions: Mapping, pred_dir) -> Path:
    root = Path(pred_dir)
    for (video, expr, frame), mask in predictions.items():
        d = root / video
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(d / f"{frame:05d}_{expr}.png")
    return root
