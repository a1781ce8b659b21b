"""Command line entry point: gen-data, train, infer, evaluate, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import pipeline
from .metrics import write_frame_csv, write_report
from .synthdata import DatasetConfig, generate_dataset, load_dataset

logger = logging.getLogger("groprompt")


def _config(path) -> pipeline.RunConfig:
    return pipeline.RunConfig.load(path) if path else pipeline.RunConfig()


def cmd_gen_data(args):
    cfg = _config(args.config)
    path = generate_dataset(DatasetConfig(cfg.num_videos, cfg.data_seed, cfg.generation()), args.out)
    print(path)


def cmd_train(args):
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    log = out / "train_log.jsonl"
    log.write_text("")
    state = pipeline.train(cfg, log_path=log)
    ckpt = pipeline.save_checkpoint(state, out / "checkpoint.zip")
    print(ckpt)


def _read_frames(video_dir: Path) -> np.ndarray:
    files = sorted(video_dir.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG frames in {video_dir}")
    return np.stack([np.array(Image.open(f).convert("RGB")) for f in files])


def cmd_infer(args):
    state = pipeline.load_checkpoint(args.ckpt)
    video_dir = Path(args.video)
    frames = _read_frames(video_dir)
    # the oracle needs the annotations of the dataset the frames came from
    data_root = Path(args.data) if args.data else video_dir.parent.parent
    videos = load_dataset(data_root) if (data_root / "manifest.json").exists() else []
    adapter = pipeline.make_adapter(args.adapter, videos)
    preds = pipeline.infer(state.model, frames, args.sentence, adapter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for t, p in enumerate(preds):
        Image.fromarray(p.mask.astype(np.uint8) * 255).save(out / f"{t:05d}.png")
        records.append({"frame": t, "box": p.box.as_list(), "confidence": p.confidence})
    (out / "boxes.json").write_text(json.dumps(records, indent=1))
    print(out)


def cmd_evaluate(args):
    state = pipeline.load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    adapter = pipeline.make_adapter(args.adapter or state.cfg.adapter, samples)
    report = pipeline.evaluate(state.model, samples, adapter, args.protocol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json")
    write_frame_csv(report, out / "frames.csv")
    print(f"Box {100 * report.box_iou:.1f}  J&F {report.jf_mean:.4f}  "
          f"J {report.j_mean:.4f}  F {report.f_mean:.4f}")


def cmd_ablate(args):
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = pipeline.ablate(cfg, out_dir=out)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    print((out / "ablation.tsv").read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groprompt")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write checkpoint.zip and train_log.jsonl")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="online inference on one video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True, help="directory of PNG frames")
    p.add_argument("--sentence", required=True)
    p.add_argument("--adapter", default="oracle")
    p.add_argument("--data", help="dataset root holding the video (for the oracle adapter)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="mask metrics and box IoU on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", default="davis_style", choices=("davis_style", "a2d_style"))
    p.add_argument("--adapter")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train both loss arms and print the comparison table")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except (pipeline.ConfigError, OSError, KeyError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
