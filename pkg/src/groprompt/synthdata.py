"""Synthetic referring-video data: moving colored shapes with motion sentences.

Every sample carries per-frame boxes (the only supervision the trainer sees)
and per-frame visible masks (held for evaluation and the oracle segmenter).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import BoundingBox

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 235),
    "yellow": (235, 220, 40),
}
# half-extent as a fraction of the frame side
SIZE_CLASSES = {"small": 0.14, "large": 0.2}
MOTIONS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
    "toward-top-right": (2 ** -0.5, -(2 ** -0.5)),
    "toward-bottom-left": (-(2 ** -0.5), 2 ** -0.5),
    "still": (0.0, 0.0),
}
OPPOSITE = {
    "left": "right", "right": "left", "up": "down", "down": "up",
    "toward-top-right": "toward-bottom-left", "toward-bottom-left": "toward-top-right",
}
BACKGROUND = (30, 30, 34)

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
VOCAB = (
    PAD, BOS, EOS, "the", *COLORS, *SHAPES, "moving", "staying", "still",
    "left", "right", "up", "down", "toward", "top", "bottom", "small", "large",
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID, BOS_ID, EOS_ID = TOKEN_ID[PAD], TOKEN_ID[BOS], TOKEN_ID[EOS]
MAX_LEN = 12


class TokenizationError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


def tokenize(sentence: str, max_len: int = MAX_LEN) -> list[int]:
    """Map a sentence to ``[BOS, words..., EOS, PAD...]`` of length ``max_len``."""
    words = sentence.split()
    for w in words:
        if w not in TOKEN_ID:
            raise TokenizationError(f"out-of-vocabulary word {w!r}")
    ids = [BOS_ID] + [TOKEN_ID[w] for w in words][: max_len - 2] + [EOS_ID]
    return ids + [PAD_ID] * (max_len - len(ids))


def motion_phrase(motion: str) -> str:
    if motion == "still":
        return "staying still"
    return "moving " + motion.replace("-", " ")


@dataclass(frozen=True)
class Trajectory:
    start: tuple[float, float]
    velocity: tuple[float, float]
    turn_at: Optional[int] = None
    velocity_after: Optional[tuple[float, float]] = None

    def center(self, t: int) -> tuple[float, float]:
        if self.turn_at is None or t <= self.turn_at:
            return (self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t)
        k = self.turn_at
        va = self.velocity_after
        return (self.start[0] + self.velocity[0] * k + va[0] * (t - k),
                self.start[1] + self.velocity[1] * k + va[1] * (t - k))


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size_class: str
    trajectory: Trajectory

    @property
    def half_extent(self) -> float:
        return SIZE_CLASSES[self.size_class]


@dataclass(frozen=True)
class Expression:
    text: str
    object_index: int
    motion_word: str

    def token_ids(self) -> list[int]:
        return tokenize(self.text)


@dataclass
class GenerationParams:
    num_frames: int = 8
    num_objects: int = 2
    size: int = 64
    # each object must keep this fraction of its pixels visible in every frame
    min_visible: float = 0.6
    # total displacement over the clip, as a fraction of the frame side
    min_travel: float = 0.15
    max_travel: float = 0.35
    turn_probability: float = 0.3
    still_probability: float = 0.1
    # objects share shape and color and differ only in motion
    motion_only: bool = False
    max_retries: int = 200

    def validate(self):
        if not 4 <= self.num_frames <= 32:
            raise ValueError(f"num_frames must be in [4, 32], got {self.num_frames}")
        if not 2 <= self.num_objects <= 4:
            raise ValueError(f"num_objects must be in [2, 4], got {self.num_objects}")
        if self.size not in (64, 128):
            raise ValueError(f"size must be 64 or 128, got {self.size}")
        if self.motion_only and self.num_objects > len(MOTIONS):
            raise ValueError("too many objects for motion-only scenes")


@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray  # (T, H, W, 3) uint8
    objects: list[SceneObject]
    expressions: list[Expression]
    gt_boxes: np.ndarray  # (T, M, 4) float64 cxcywh
    gt_masks: np.ndarray  # (T, M, H, W) bool

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def box(self, t: int, i: int) -> BoundingBox:
        return BoundingBox(*self.gt_boxes[t, i].tolist())

    def weak(self) -> "WeakSample":
        return WeakSample(self.video_id, self.frames, tuple(self.expressions), self.gt_boxes)

    def __eq__(self, other):
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (self.video_id == other.video_id and self.objects == other.objects
                and self.expressions == other.expressions
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.gt_boxes, other.gt_boxes)
                and np.array_equal(self.gt_masks, other.gt_masks))


@dataclass(frozen=True)
class WeakSample:
    """What the trainer may see: frames, sentences and boxes. No masks."""
    video_id: str
    frames: np.ndarray
    expressions: tuple[Expression, ...]
    gt_boxes: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _shape_mask(shape: str, cx: float, cy: float, r: float, n: int) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n
    dx = c[None, :] - cx
    dy = c[:, None] - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        # apex up, base at cy + r
        depth = dy + r
        return (depth >= 0) & (dy <= r) & (np.abs(dx) <= depth / 2)
    raise ValueError(f"unknown shape {shape!r}")


def tight_box(mask: np.ndarray) -> BoundingBox:
    h, w = mask.shape
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if len(xs) == 0:
        raise ValueError("empty mask has no box")
    return BoundingBox.from_corners(xs[0] / w, ys[0] / h, (xs[-1] + 1) / w, (ys[-1] + 1) / h)


def _sample_trajectory(rng: np.random.Generator, motion: str, r: float,
                       p: GenerationParams) -> Trajectory:
    steps = p.num_frames - 1
    d = np.array(MOTIONS[motion])
    travel = rng.uniform(p.min_travel, p.max_travel) if motion != "still" else 0.0
    turn_at = None
    after = None
    if motion != "still" and rng.random() < p.turn_probability:
        turn_at = int(rng.integers(1, steps))
        # speed change at the turn point, direction preserved
        ratio = rng.uniform(0.3, 1.7)
        speed = travel / (turn_at + ratio * (steps - turn_at))
        v = d * speed
        after = tuple((d * speed * ratio).tolist())
    else:
        v = d * (travel / steps)
    disp = v * (turn_at if turn_at is not None else steps)
    if after is not None:
        disp = disp + np.array(after) * (steps - turn_at)
    # start range keeping the whole path inside [r, 1 - r]
    lo = np.maximum(r, r - disp)
    hi = np.minimum(1 - r, 1 - r - disp)
    if bool((hi < lo).any()):
        raise GenerationError("travel too long for object size")
    start = rng.uniform(lo, hi)
    return Trajectory(tuple(start.tolist()), tuple(v.tolist()), turn_at, after)


def motion_consistent(boxes: np.ndarray, motion: str, tol: float = 1e-9) -> bool:
    """Check a (T, 4) box track against a motion word over the whole clip."""
    delta = boxes[-1, :2] - boxes[0, :2]
    if motion == "still":
        return bool(np.all(np.abs(delta) <= 2.0 / 64))
    d = np.array(MOTIONS[motion])
    along = float(delta @ d)
    across = float(np.abs(delta - along * d).max())
    return along > tol and across <= max(0.5 * along, 2.0 / 64)


def _render(objects: list[SceneObject], p: GenerationParams, rng: np.random.Generator):
    n, T, M = p.size, p.num_frames, len(objects)
    frames = np.empty((T, n, n, 3), dtype=np.uint8)
    masks = np.zeros((T, M, n, n), dtype=bool)
    boxes = np.zeros((T, M, 4), dtype=np.float64)
    noise = rng.integers(-6, 7, size=(n, n, 1))
    base = np.clip(np.array(BACKGROUND)[None, None, :] + noise, 0, 255)
    for t in range(T):
        img = base.copy()
        full = [_shape_mask(o.shape, *o.trajectory.center(t), o.half_extent, n) for o in objects]
        covered = np.zeros((n, n), dtype=bool)
        # later objects are drawn on top
        for i in reversed(range(M)):
            vis = full[i] & ~covered
            area = full[i].sum()
            if area == 0 or vis.sum() < p.min_visible * area:
                return None
            masks[t, i] = vis
            covered |= full[i]
        for i, o in enumerate(objects):
            img[full[i]] = COLORS[o.color]
        frames[t] = img.astype(np.uint8)
        for i in range(M):
            boxes[t, i] = tight_box(masks[t, i]).as_list()
    return frames, masks, boxes


def _choose_objects(rng: np.random.Generator, p: GenerationParams):
    M = p.num_objects
    if p.motion_only:
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        size_class = list(SIZE_CLASSES)[rng.integers(len(SIZE_CLASSES))]
        moving = [m for m in MOTIONS if m != "still"]
        first = moving[rng.integers(len(moving))]
        motions = [first, OPPOSITE[first]]
        rest = [m for m in MOTIONS if m not in motions]
        motions += [rest[k] for k in rng.permutation(len(rest))[: M - 2]]
        return [(shape, color, size_class, m) for m in motions[:M]]
    pairs = [(s, c) for s in SHAPES for c in COLORS]
    picks = rng.permutation(len(pairs))[:M]
    out = []
    for k in picks:
        shape, color = pairs[k]
        size_class = list(SIZE_CLASSES)[rng.integers(len(SIZE_CLASSES))]
        if rng.random() < p.still_probability:
            motion = "still"
        else:
            moving = [m for m in MOTIONS if m != "still"]
            motion = moving[rng.integers(len(moving))]
        out.append((shape, color, size_class, motion))
    return out


def generate_video(params: GenerationParams, seed: int, video_id: Optional[str] = None) -> VideoSample:
    """Generate one sample; a pure function of ``(params, seed)``."""
    params.validate()
    rng = np.random.default_rng(seed)
    for _ in range(params.max_retries):
        choice = _choose_objects(rng, params)
        try:
            objects = [
                SceneObject(shape, color, size_class,
                            _sample_trajectory(rng, motion, SIZE_CLASSES[size_class], params))
                for shape, color, size_class, motion in choice
            ]
        except GenerationError:
            continue
        rendered = _render(objects, params, rng)
        if rendered is None:
            continue
        frames, masks, boxes = rendered
        if not all(motion_consistent(boxes[:, i], c[3]) for i, c in enumerate(choice)):
            continue
        expressions = [
            Expression(f"the {color} {shape} {motion_phrase(motion)}", i, motion)
            for i, (shape, color, _, motion) in enumerate(choice)
        ]
        return VideoSample(video_id or f"v{seed}", frames, objects, expressions, boxes, masks)
    raise GenerationError(
        f"could not place {params.num_objects} objects within {params.max_retries} retries")


@dataclass
class DatasetConfig:
    num_videos: int = 4
    seed: int = 0
    params: GenerationParams = field(default_factory=GenerationParams)


def video_seeds(cfg: DatasetConfig) -> list[int]:
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.num_videos)
    return [int(c.generate_state(1)[0]) for c in children]


def generate_samples(cfg: DatasetConfig) -> list[VideoSample]:
    return [generate_video(cfg.params, s, video_id=f"video{k:04d}")
            for k, s in enumerate(video_seeds(cfg))]


def _save_png(path: Path, arr: np.ndarray):
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as e:
        raise OSError(f"failed to write {path}: {e}") from e


def _object_record(o: SceneObject) -> dict:
    d = asdict(o)
    d["trajectory"]["start"] = list(o.trajectory.start)
    d["trajectory"]["velocity"] = list(o.trajectory.velocity)
    if o.trajectory.velocity_after is not None:
        d["trajectory"]["velocity_after"] = list(o.trajectory.velocity_after)
    return d


def save_samples(samples: list[VideoSample], out_dir, config: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    entries = []
    for s in samples:
        vdir = out / "videos" / s.video_id
        mdir = out / "masks" / s.video_id
        vdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        frame_files = []
        mask_files = []
        for t in range(s.num_frames):
            name = f"{t:05d}.png"
            _save_png(vdir / name, s.frames[t])
            frame_files.append(f"videos/{s.video_id}/{name}")
            row = []
            for i in range(s.num_objects):
                mname = f"{t:05d}_{i}.png"
                _save_png(mdir / mname, s.gt_masks[t, i].astype(np.uint8) * 255)
                row.append(f"masks/{s.video_id}/{mname}")
            mask_files.append(row)
        entries.append({
            "id": s.video_id,
            "T": s.num_frames,
            "M": s.num_objects,
            "frames": frame_files,
            "masks": mask_files,
            "expressions": [asdict(e) for e in s.expressions],
            "objects": [_object_record(o) for o in s.objects],
            "boxes": [[s.gt_boxes[t, i].tolist() for i in range(s.num_objects)]
                      for t in range(s.num_frames)],
        })
    manifest = {"config": config or {}, "samples": entries}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=1))
    except OSError as e:
        raise OSError(f"failed to write {path}: {e}") from e
    return path


def generate_dataset(cfg: DatasetConfig, out_dir) -> Path:
    """Generate ``cfg.num_videos`` samples and write manifest plus PNG assets."""
    samples = generate_samples(cfg)
    record = {"num_videos": cfg.num_videos, "seed": cfg.seed, "params": asdict(cfg.params)}
    path = save_samples(samples, out_dir, record)
    logger.info("wrote %d videos to %s", len(samples), path)
    return path


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as e:
        raise OSError(f"failed to read {path}: {e}") from e


def _parse_object(d: dict) -> SceneObject:
    tr = d["trajectory"]
    after = tr.get("velocity_after")
    traj = Trajectory(tuple(tr["start"]), tuple(tr["velocity"]), tr.get("turn_at"),
                      tuple(after) if after is not None else None)
    return SceneObject(d["shape"], d["color"], d["size_class"], traj)


def load_dataset(path) -> list[VideoSample]:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as e:
        raise OSError(f"failed to read {manifest_path}: {e}") from e
    samples = []
    for e in manifest["samples"]:
        frames = np.stack([_read_png(root / f) for f in e["frames"]])
        masks = np.stack([np.stack([_read_png(root / f) > 127 for f in row]) for row in e["masks"]])
        samples.append(VideoSample(
            video_id=e["id"],
            frames=frames,
            objects=[_parse_object(o) for o in e["objects"]],
            expressions=[Expression(**x) for x in e["expressions"]],
            gt_boxes=np.asarray(e["boxes"], dtype=np.float64),
            gt_masks=masks,
        ))
    return samples


def load_weak_dataset(path) -> list[WeakSample]:
    """Load frames, sentences and boxes only; mask files are never opened."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    return [
        WeakSample(e["id"], np.stack([_read_png(root / f) for f in e["frames"]]),
                   tuple(Expression(**x) for x in e["expressions"]),
                   np.asarray(e["boxes"], dtype=np.float64))
        for e in manifest["samples"]
    ]
