"""Command line: synth, train, eval, predict, ablate.

    rtcan synth   --out DIR --count N [--seed S] [--difficulty easy|hard]
    rtcan train   --config RUN.yaml
    rtcan eval    --checkpoint CKPT --manifest PATH [--split test] [--out DIR]
    rtcan predict --checkpoint CKPT --rgb RGB.png --thermal THERMAL.png --out DIR
    rtcan ablate  --config RUN.yaml

Every command refuses to overwrite existing outputs unless --force is given.
Exit status: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image
from pydantic import ValidationError

from . import __version__
from .canonical import canonical_json
from .dataset import (
    MANIFEST_FILENAME,
    MODALITIES,
    load_manifest,
    make_split,
    normalize_rgb,
    normalize_thermal,
    write_manifest,
)
from .engine import (
    BEST_CHECKPOINT,
    CHECKPOINT_DIR,
    HISTORY_FILENAME,
    ablation_rows,
    evaluate_model,
    export_best,
    format_ablation_table,
    load_checkpoint,
    resolve_device,
    run_ablation,
    train,
)
from .errors import AlignmentError, OutputExistsError, RTCANError, SplitError
from .models import EvaluationResult, Manifest, RunConfig
from .network import INPUT_MULTIPLE, predict_mask
from .synth import DEFAULT_SIZE, generate_dataset

logger = logging.getLogger("rtcan")

ENV_LOG_LEVEL = "RTCAN_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
OVERLAY_COLOR = np.array([0.0, 255.0, 0.0])
OVERLAY_ALPHA = 0.5
REPORT_FILENAME = "report.json"
DIAGNOSTICS_FILENAME = "diagnostics.json"


def configure_logging() -> None:
    level = os.environ.get(ENV_LOG_LEVEL, "INFO").strip().upper() or "INFO"
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, stream=sys.stderr)


# --- Config and output guards ---

def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate a YAML run config. Relative paths resolve against the config file's directory."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise RTCANError(f"{path}: run config must be a mapping with data/model/train/loss/output sections")
    config = RunConfig.model_validate(raw)
    base = path.parent
    data = config.data
    if not data.manifest.is_absolute():
        data = data.model_copy(update={"manifest": base / data.manifest})
    output = config.output if config.output.is_absolute() else base / config.output
    return config.model_copy(update={"data": data, "output": output})


def _guard(paths: Sequence[Path], force: bool) -> None:
    """Refuse existing outputs without --force; with it, remove them."""
    existing = [p for p in paths if p.exists()]
    if not existing:
        return
    if not force:
        raise OutputExistsError(f"{existing[0]} exists; pass --force to overwrite")
    for p in existing:
        if p.is_dir():
            shutil.rmtree(p)
        else:
            p.unlink()


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(payload, indent=2), encoding="utf-8")


def _write_evaluation(out: Path, result: EvaluationResult) -> dict:
    report = result.report.as_percent()
    _write_json(out / REPORT_FILENAME, report)
    _write_json(out / DIAGNOSTICS_FILENAME, result)
    return report


def _labelled_manifest(config: RunConfig) -> Manifest:
    manifest = load_manifest(config.data.manifest)
    if manifest.has_splits:
        return manifest
    manifest = make_split(
        manifest,
        train_fraction=config.data.train_fraction,
        val_fraction_of_train=config.data.val_fraction_of_train,
        seed=config.data.split_seed,
    )
    path = write_manifest(manifest, config.output / MANIFEST_FILENAME)
    logger.info("Manifest had no split labels; wrote split manifest %s", path)
    return manifest


# --- Commands ---

def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    _guard([out / m for m in MODALITIES] + [out / MANIFEST_FILENAME], args.force)
    manifest = generate_dataset(args.count, out, args.seed, args.difficulty, (args.height, args.width))
    print(Path(manifest.root) / MANIFEST_FILENAME)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    out = config.output
    _guard(
        [
            out / HISTORY_FILENAME,
            out / CHECKPOINT_DIR,
            out / BEST_CHECKPOINT,
            out / Path(BEST_CHECKPOINT).with_suffix(".json"),
            out / REPORT_FILENAME,
            out / DIAGNOSTICS_FILENAME,
            out / MANIFEST_FILENAME,
            out / "config.json",
        ],
        args.force,
    )
    manifest = _labelled_manifest(config)
    if not manifest.ids("test"):
        raise SplitError(f"{config.data.manifest}: no test entries; report.json cannot be written")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config)
    preprocess = config.data.preprocess_config()

    history = train(
        config.model,
        config.train,
        manifest,
        preprocess=preprocess,
        loss_config=config.loss,
        output_dir=out,
    )
    best = export_best(history, out, config.train.selection_metric)
    logger.info("Best checkpoint: %s", best)

    model, meta = load_checkpoint(best, config.model)
    result = evaluate_model(
        model, manifest, "test", meta.preprocess, config.train.eval_batch_size, resolve_device(config.train.device)
    )
    print(json.dumps(_write_evaluation(out, result), indent=2, sort_keys=True))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    out = Path(args.out) if args.out else checkpoint.parent / f"eval_{args.split}"
    _guard([out / REPORT_FILENAME, out / DIAGNOSTICS_FILENAME], args.force)
    expected = load_run_config(args.config).model if args.config else None
    manifest = load_manifest(args.manifest)
    model, meta = load_checkpoint(checkpoint, expected)
    result = evaluate_model(model, manifest, args.split, meta.preprocess, args.batch_size, resolve_device(args.device))
    print(json.dumps(_write_evaluation(out, result), indent=2, sort_keys=True))
    return 0


def pad_to_multiple(x: torch.Tensor, multiple: int = INPUT_MULTIPLE) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad a C×H×W tensor on the bottom/right to the next multiple; returns the original (H, W)."""
    h, w = int(x.shape[-2]), int(x.shape[-1])
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x[None], (0, pw, 0, ph), mode=mode)[0], (h, w)


def overlay_mask(rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend the highlight color into gas pixels only; background pixels are returned unchanged."""
    out = rgb.copy()
    sel = mask.astype(bool)
    blended = (1.0 - OVERLAY_ALPHA) * rgb[sel].astype(np.float64) + OVERLAY_ALPHA * OVERLAY_COLOR
    out[sel] = np.clip(np.round(blended), 0, 255).astype(np.uint8)
    return out


def cmd_predict(args: argparse.Namespace) -> int:
    out = Path(args.out)
    _guard([out / "mask.png", out / "overlay.png"], args.force)
    with Image.open(args.rgb) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    with Image.open(args.thermal) as im:
        thermal = np.asarray(im.convert("L"), dtype=np.uint8)[:, :, None]
    if rgb.shape[:2] != thermal.shape[:2]:
        raise AlignmentError(f"rgb {rgb.shape[:2]} and thermal {thermal.shape[:2]} sizes differ")

    model, meta = load_checkpoint(args.checkpoint)
    device = resolve_device(args.device)
    rgb_t, (h, w) = pad_to_multiple(torch.from_numpy(normalize_rgb(rgb, meta.preprocess)))
    thermal_arr, _ = normalize_thermal(thermal, meta.preprocess, location=str(args.thermal))
    thermal_t, _ = pad_to_multiple(torch.from_numpy(thermal_arr))
    with torch.no_grad():
        pred = predict_mask(model.to(device)(rgb_t[None].to(device), thermal_t[None].to(device)))
    mask = pred[0, :h, :w].cpu().numpy().astype(np.uint8)

    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask * 255).save(out / "mask.png")
    Image.fromarray(overlay_mask(rgb, mask)).save(out / "overlay.png")
    logger.info("Predicted %d gas pixels of %d", int(mask.sum()), mask.size)
    print(out / "mask.png")
    print(out / "overlay.png")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    out = config.output
    _guard(
        [out / f"scheme_{s}" for s in ("A", "B", "C")]
        + [out / "ablation.json", out / "ablation.txt", out / MANIFEST_FILENAME],
        args.force,
    )
    out.mkdir(parents=True, exist_ok=True)
    manifest = _labelled_manifest(config)
    results = run_ablation(manifest, config)
    table = format_ablation_table(results)
    _write_json(out / "ablation.json", {"rows": ablation_rows(results)})
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


# --- Parser ---

def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtcan", description="RGB-thermal gas segmentation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic Gas-DB-layout dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", choices=("easy", "hard"), default="easy")
    p.add_argument("--height", type=_positive_int, default=DEFAULT_SIZE[0])
    p.add_argument("--width", type=_positive_int, default=DEFAULT_SIZE[1])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train, select the best checkpoint, report on test")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")
    p.add_argument("--config", help="run config whose model section the checkpoint must match")
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--device", choices=("cpu", "accelerator"), default="cpu")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="mask and overlay for one rgb/thermal pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--device", choices=("cpu", "accelerator"), default="cpu")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and test schemes A, B, C")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_ablate)

    for action in sub.choices.values():
        action.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RTCANError, ValidationError, OSError, yaml.YAMLError) as e:
        print(f"rtcan {args.command}: {e}", file=sys.stderr)
        return 1


def run() -> None:
    configure_logging()
    sys.exit(main())
