"""Run configuration, training, checkpoints, online inference, evaluation and ablation."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .geometry import BoundingBox, clamp_box, iou
from .losses import (
    LossWeights, box_loss, confidence_loss, modalcon_loss, textcon_loss, total_loss,
)
from .metrics import MetricsReport, evaluate_dataset
from .model import GroundingModel, ModelConfig, build_model, select_top
from .segmenter import (
    FrozenSegmenter, SegmentAdapter, SerializedAdapter, aggregate_video_feature, get_adapter,
    run_adapter,
)
from .synthdata import (
    DatasetConfig, GenerationParams, VideoSample, WeakSample, generate_samples, load_dataset,
    load_weak_dataset, tokenize,
)

logger = logging.getLogger(__name__)

ARMS = ("grounding_only", "box_only", "box_plus_contra")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data: a dataset directory, or empty to generate videos in memory
    data: str = ""
    eval_data: str = ""
    num_videos: int = 4
    data_seed: int = 0
    eval_videos: int = 0
    eval_seed: int = 1
    num_frames: int = 8
    num_objects: int = 2
    image_size: int = 64
    motion_only: bool = False
    # model
    dim: int = 64
    patch: int = 8
    num_queries: int = 8
    heads: int = 4
    layers: int = 6
    # loss weights
    lambda_r: float = 5.0
    lambda_g: float = 2.0
    lambda_f: float = 0.01
    lambda_v: float = 0.1
    lambda_cls: float = 1.0
    margin: float = 0.0
    # optimization
    optimizer: str = "sgd"
    lr: float = 1e-4
    momentum: float = 0.9
    lr_schedule: str = "constant"
    grad_clip: float = 0.0
    epochs: int = 12
    max_steps: int = 0
    batch_size: int = 1
    clip_len: int = 8
    seed: int = 0
    arm: str = "box_plus_contra"
    adapter: str = "oracle"
    protocol: str = "davis_style"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.batch_size != 1:
            raise ConfigError("only batch_size = 1 (one clip per step) is supported")
        if self.clip_len < 1 or self.epochs < 0 or self.max_steps < 0 or self.lr < 0:
            raise ConfigError("clip_len must be >= 1 and epochs, max_steps, lr >= 0")
        try:
            self.weights()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def weights(self) -> LossWeights:
        w = LossWeights(self.lambda_r, self.lambda_g, self.lambda_f, self.lambda_v, self.lambda_cls)
        if self.arm != "box_plus_contra":
            w = dataclasses.replace(w, lambda_f=0.0, lambda_v=0.0)
        return w

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, patch=self.patch, dim=self.dim,
                           num_queries=self.num_queries, heads=self.heads, layers=self.layers)

    def generation(self) -> GenerationParams:
        return GenerationParams(num_frames=self.num_frames, num_objects=self.num_objects,
                                size=self.image_size, motion_only=self.motion_only)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # canonical text form -------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(v)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse_value(key, value, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, value: str, type_name: str):
    try:
        if type_name == "bool":
            if value.lower() not in ("true", "false"):
                raise ValueError
            return value.lower() == "true"
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type_name}") from None


# data ---------------------------------------------------------------------

def load_training_data(cfg: RunConfig) -> list[WeakSample]:
    if cfg.data:
        return load_weak_dataset(cfg.data)
    return [s.weak() for s in generate_samples(DatasetConfig(cfg.num_videos, cfg.data_seed,
                                                             cfg.generation()))]


def load_eval_data(cfg: RunConfig) -> list[VideoSample]:
    if cfg.eval_data:
        return load_dataset(cfg.eval_data)
    if cfg.eval_videos:
        return generate_samples(DatasetConfig(cfg.eval_videos, cfg.eval_seed, cfg.generation()))
    if cfg.data:
        return load_dataset(cfg.data)
    return generate_samples(DatasetConfig(cfg.num_videos, cfg.data_seed, cfg.generation()))


@dataclass(frozen=True)
class Step:
    video: int
    anchor: int
    negative: int
    start: int


def epoch_plan(samples: Sequence[WeakSample], cfg: RunConfig, epoch: int) -> list[Step]:
    """Every (video, expression) pair once, in a seeded order, with a clip window and a negative."""
    rng = np.random.default_rng([cfg.seed, epoch])
    pairs = [(v, i) for v, s in enumerate(samples) for i in range(len(s.expressions))]
    plan = []
    for k in rng.permutation(len(pairs)):
        v, i = pairs[k]
        s = samples[v]
        others = [j for j in range(len(s.expressions)) if j != i]
        j = int(others[rng.integers(len(others))]) if others else i
        span = max(s.num_frames - cfg.clip_len, 0)
        plan.append(Step(v, i, j, int(rng.integers(span + 1))))
    return plan


def check_training_data(samples: Sequence[WeakSample], cfg: RunConfig):
    if not samples:
        raise ConfigError("training set is empty")
    if cfg.arm == "box_plus_contra":
        short = [s.video_id for s in samples if len(s.expressions) < 2]
        if short:
            raise ConfigError(f"contrastive arm needs >= 2 expressions per video; {short[:5]} have fewer")
    for s in samples:
        if isinstance(s, VideoSample):
            raise TypeError("the trainer only accepts box-annotated samples (use .weak())")


# optimization ------------------------------------------------------------

def make_optimizer(model: GroundingModel, cfg: RunConfig) -> torch.optim.Optimizer:
    params = [p for _, p in model.trainable_named_parameters()]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.lr)


def learning_rate(cfg: RunConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine" and total > 0:
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))
    return cfg.lr


def total_steps(samples: Sequence[WeakSample], cfg: RunConfig) -> int:
    if cfg.arm == "grounding_only":
        return 0
    per_epoch = sum(len(s.expressions) for s in samples)
    n = cfg.epochs * per_epoch
    return min(n, cfg.max_steps) if cfg.max_steps else n


def select_per_frame(model: GroundingModel, frames, token_ids):
    """Run the model over a clip and pick each frame's highest-confidence proposal."""
    txt = model.encode_text(token_ids)
    p = model(frames, txt)
    k = torch.argmax(p.confidence_logits, dim=-1)
    boxes = p.boxes[torch.arange(len(k)), k]
    return p, boxes, txt


def training_loss(model: GroundingModel, seg: FrozenSegmenter, sample: WeakSample, step: Step,
                  cfg: RunConfig):
    w = cfg.weights()
    window = slice(step.start, step.start + cfg.clip_len)
    frames = sample.frames[window]
    anchor = sample.expressions[step.anchor]
    gt = torch.as_tensor(sample.gt_boxes[window, anchor.object_index], dtype=torch.float32)
    p, boxes, txt = select_per_frame(model, frames, anchor.token_ids())
    if not (bool(torch.isfinite(p.boxes).all()) and bool(torch.isfinite(p.confidence_logits).all())):
        raise FloatingPointError("non-finite proposals")
    l_box = box_loss(boxes, gt, w)
    l_cls = confidence_loss(p.confidence_logits, p.boxes, gt)
    l_f = l_v = torch.zeros(())
    if cfg.arm == "box_plus_contra":
        negative = sample.expressions[step.negative]
        _, neg_boxes, neg_txt = select_per_frame(model, frames, negative.token_ids())
        prompt = seg.prompt_encode(boxes)
        l_f = textcon_loss(prompt, seg.prompt_encode(gt), seg.prompt_encode(neg_boxes), cfg.margin)
        video = aggregate_video_feature(prompt, seg.frozen_image_encode(frames))
        l_v = modalcon_loss(video, seg.sentence_feature(txt.sentence_feature),
                            seg.sentence_feature(neg_txt.sentence_feature), cfg.margin)
    return total_loss(l_box, l_f, l_v, l_cls, w)


@dataclass
class TrainState:
    model: GroundingModel
    optimizer: torch.optim.Optimizer
    cfg: RunConfig
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)


def init_state(cfg: RunConfig) -> TrainState:
    model = build_model(cfg.model_config(), seed=cfg.seed)
    return TrainState(model, make_optimizer(model, cfg), cfg)


def train(cfg: RunConfig, samples: Optional[Sequence[WeakSample]] = None,
          state: Optional[TrainState] = None, log_path=None, stop_at: Optional[int] = None,
          on_step: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Train (or resume ``state``) until the configured number of steps.

    ``stop_at`` ends the run early at that global step, which is how resume
    equivalence is tested. Loss records go to ``log_path`` as JSON lines; wall
    times go to a sibling ``.timing.jsonl`` file so the loss log is reproducible.
    """
    torch.set_num_threads(1)
    samples = list(samples) if samples is not None else load_training_data(cfg)
    check_training_data(samples, cfg)
    state = state or init_state(cfg)
    if state.cfg.digest() != cfg.digest():
        raise ConfigError("resume state was produced by a different config")
    n_total = total_steps(samples, cfg)
    end = n_total if stop_at is None else min(stop_at, n_total)
    per_epoch = sum(len(s.expressions) for s in samples)
    seg = FrozenSegmenter()
    params = [p for _, p in state.model.trainable_named_parameters()]
    log = timing = None
    if log_path is not None:
        log_path = Path(log_path)
        log = log_path.open("a")
        timing = log_path.with_suffix(".timing.jsonl").open("a")
    t0 = time.perf_counter()
    state.model.train()
    try:
        while state.step < end:
            epoch, pos = divmod(state.step, per_epoch)
            plan = epoch_plan(samples, cfg, epoch)
            step = plan[pos]
            for group in state.optimizer.param_groups:
                group["lr"] = learning_rate(cfg, state.step, n_total)
            try:
                out = training_loss(state.model, seg, samples[step.video], step, cfg)
                state.optimizer.zero_grad()
                out.total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                state.optimizer.step()
                if not all(bool(torch.isfinite(p).all()) for p in params):
                    raise FloatingPointError("non-finite parameters")
            except FloatingPointError as e:
                raise FloatingPointError(f"training diverged at step {state.step}: {e} "
                                         "(lower lr or set grad_clip)") from e
            record ={"step": state.step, "epoch": epoch, **out.record()}
            state.history.append(record)
            state.step += 1
            state.epoch = state.step // per_epoch
            if log:
                log.write(json.dumps(record) + "\n")
                timing.write(json.dumps({"step": record["step"],
                                         "wall": round(time.perf_counter() - t0, 4)}) + "\n")
            if on_step:
                on_step(record)
    finally:
        if log:
            log.close()
            timing.close()
    state.model.eval()
    return state


# checkpoints -------------------------------------------------------------

_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _npy_load(data: bytes) -> torch.Tensor:
    return torch.from_numpy(np.load(io.BytesIO(data), allow_pickle=False).copy())


def _write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(state: TrainState, path) -> Path:
    """Write parameters, optimizer state and metadata into one reproducible zip archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = {id(p): n for n, p in state.model.named_parameters()}
    meta = {
        "config": state.cfg.to_text(), "config_hash": state.cfg.digest(),
        "seed": state.cfg.seed, "epoch": state.epoch, "step": state.step,
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, p in state.model.named_parameters():
            _write(zf, f"params/{name}.npy", _npy_bytes(p))
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                for key, value in sorted(state.optimizer.state.get(p, {}).items()):
                    _write(zf, f"optimizer/{names[id(p)]}/{key}.npy", _npy_bytes(torch.as_tensor(value)))
        _write(zf, "history.jsonl", "".join(json.dumps(r) + "\n" for r in state.history).encode())
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise OSError(f"failed to read checkpoint {path}: {e}") from e
    with zf:
        meta = json.loads(zf.read("meta.json"))
        cfg = RunConfig.from_text(meta["config"])
        if cfg.digest() != meta["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch")
        state = init_state(cfg)
        params = dict(state.model.named_parameters())
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(_npy_load(zf.read(f"params/{name}.npy")))
        for entry in zf.namelist():
            if not entry.startswith("optimizer/"):
                continue
            name, key = entry[len("optimizer/"):-len(".npy")].rsplit("/", 1)
            state.optimizer.state[params[name]][key] = _npy_load(zf.read(entry))
        state.step, state.epoch = meta["step"], meta["epoch"]
        state.history = [json.loads(line) for line in zf.read("history.jsonl").decode().splitlines()]
    state.model.eval()
    return state


# inference and evaluation ------------------------------------------------

@dataclass
class FramePrediction:
    box: BoundingBox
    confidence: float
    mask: np.ndarray


def make_adapter(name: str, videos: Sequence[VideoSample] = ()) -> SegmentAdapter:
    """Adapters are built with the annotated videos; only the oracle uses them."""
    adapter = get_adapter(name, videos=list(videos))
    return adapter if adapter.concurrency_safe else SerializedAdapter(adapter)


@torch.no_grad()
def infer(model: GroundingModel, frames, sentence, adapter: SegmentAdapter,
          boxes: Optional[np.ndarray] = None) -> list[FramePrediction]:
    """Online inference: each frame is processed as it arrives, with no lookahead.

    ``boxes`` (T, 4) replaces the proposals, which gives the GT-box upper bound.
    """
    token_ids = tokenize(sentence) if isinstance(sentence, str) else sentence
    if boxes is None and model is None:
        raise ValueError("need a model or explicit boxes")
    txt = model.encode_text(token_ids) if model is not None else None
    out = []
    for t in range(len(frames)):
        frame = np.asarray(frames[t])
        if boxes is None:
            box, conf, _ = select_top(model(frame, txt).frame(0))
            box, conf = clamp_box(box.double()), float(conf)
        else:
            box, conf = torch.as_tensor(boxes[t], dtype=torch.float64), 1.0
        prompt = BoundingBox.from_tensor(box)
        mask = run_adapter(adapter, frame, prompt, frame_index=t)
        out.append(FramePrediction(prompt, conf, mask))
    return out


def evaluate(model: Optional[GroundingModel], samples: Sequence[VideoSample], adapter: SegmentAdapter,
             protocol: str = "davis_style", use_gt_boxes: bool = False) -> MetricsReport:
    """Mask metrics plus mean IoU of the prompt boxes against GT boxes (``box_iou``)."""
    preds, gts, box_ious = {}, {}, []
    for s in samples:
        for e_idx, e in enumerate(s.expressions):
            k = e.object_index
            gt_boxes = s.gt_boxes[:, k] if use_gt_boxes else None
            frames = infer(model, s.frames, e.token_ids(), adapter, boxes=gt_boxes)
            for t, fp in enumerate(frames):
                preds[(s.video_id, e_idx, t)] = fp.mask
                gts[(s.video_id, e_idx, t)] = s.gt_masks[t, k]
                box_ious.append(iou(fp.box, s.box(t, k)))
    report = evaluate_dataset(preds, gts, protocol)
    report.box_iou = float(np.mean(box_ious))
    return report


def ablate(cfg: RunConfig, samples: Optional[Sequence[WeakSample]] = None,
           eval_samples: Optional[Sequence[VideoSample]] = None, out_dir=None) -> list[dict]:
    """Four rows: untrained grounding baseline, box loss only, box plus contrastive, GT boxes."""
    samples = list(samples) if samples is not None else load_training_data(cfg)
    eval_samples = list(eval_samples) if eval_samples is not None else load_eval_data(cfg)
    adapter = make_adapter(cfg.adapter, eval_samples)
    rows = []
    for label, arm in (("baseline", "grounding_only"), ("box_only", "box_only"),
                       ("box_plus_contra", "box_plus_contra")):
        arm_cfg = cfg.replace(arm=arm)
        log = Path(out_dir) / f"{arm}.jsonl" if out_dir else None
        state = train(arm_cfg, samples, log_path=log)
        if out_dir:
            save_checkpoint(state, Path(out_dir) / f"{arm}.zip")
        rows.append(_row(label, evaluate(state.model, eval_samples, adapter, cfg.protocol)))
    rows.append(_row("gt_box_upper_bound",
                     evaluate(None, eval_samples, adapter, cfg.protocol, use_gt_boxes=True)))
    if out_dir:
        write_table(rows, Path(out_dir) / "ablation.tsv")
    return rows


def _row(arm: str, r: MetricsReport) -> dict:
    return {"arm": arm, "Box": 100.0 * r.box_iou, "J&F": r.jf_mean, "J": r.j_mean, "F": r.f_mean}


def write_table(rows: list[dict], path) -> Path:
    path = Path(path)
    lines = ["arm\tBox\tJ&F\tJ\tF"]
    lines += [f"{r['arm']}\t{r['Box']:.1f}\t{r['J&F']:.4f}\t{r['J']:.4f}\t{r['F']:.4f}" for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path
