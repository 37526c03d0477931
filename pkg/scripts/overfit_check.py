#!/usr/bin/env python3
"""
Overfit a fresh RT-CAN on a handful of easy synthetic pairs and report training-set IoU.
Usage: python scripts/overfit_check.py [work_dir] [--pairs 8] [--steps 200]
"""
from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import numpy as np

from rtcan.engine import evaluate_model, train
from rtcan.models import ModelConfig, PreprocessConfig, TrainConfig
from rtcan.network import build_model
from rtcan.synth import DEFAULT_SIZE, generate_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("work_dir", nargs="?")
    parser.add_argument("--pairs", type=int, default=8)
    parser.add_argument("--steps", type=int, default=200)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    work = Path(args.work_dir) if args.work_dir else Path(tempfile.mkdtemp(prefix="rtcan-overfit-"))
    manifest = generate_dataset(args.pairs + 1, work / "data", seed=7, size=DEFAULT_SIZE)
    # last pair is the validation holdout, the rest train
    entries = [
        e.model_copy(update={"split": "train" if i < args.pairs else "val"})
        for i, e in enumerate(sorted(manifest.entries, key=lambda e: e.id))
    ]
    manifest = manifest.model_copy(update={"entries": entries})

    mc = ModelConfig(decoder_channels=32)
    tc = TrainConfig(epochs=10_000, batch_size=4, lr=0.01, lr_decay_gamma=0.99, max_steps=args.steps)
    pre = PreprocessConfig(target_size=DEFAULT_SIZE, hflip_prob=0.0)
    model = build_model(mc)
    history = train(mc, tc, manifest, preprocess=pre, model=model)

    losses = history.step_losses
    result = evaluate_model(model, manifest, "train", pre)
    print(f"steps:            {len(losses)}")
    print(f"loss first/last20: {np.mean(losses[:20]):.4f} -> {np.mean(losses[-20:]):.4f}")
    print(f"train IoU:        {result.report.iou:.4f}")
    print(f"train F2:         {result.report.f2:.4f}")
    sys.exit(0 if result.report.iou >= 0.85 else 1)


if __name__ == "__main__":
    main()
