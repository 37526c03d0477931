"""Training, checkpointing, best-model selection, evaluation and the A/B/C ablation harness."""

from __future__ import annotations

import logging
import random
import shutil
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
from pydantic import ValidationError
from torch.utils.data import DataLoader

from .canonical import CHECKPOINT_FORMAT_VERSION, canonical_json, canonical_sha256
from .dataset import GasDBDataset, manifest_sha256
from .errors import CheckpointError, ConfigHashMismatchError, ModelConfigError, NonFiniteLossError, SplitError
from .losses import combined_loss
from .metrics import compute, confusion, macro_average, mean_class_accuracy, class_accuracies, merge, merge_all
from .models import (
    CheckpointMeta,
    ConfusionCounts,
    EpochRecord,
    EvaluationResult,
    LossConfig,
    Manifest,
    MetricsReport,
    ModelConfig,
    PreprocessConfig,
    RunConfig,
    SchemeVariant,
    Split,
    TrainConfig,
    TrainHistory,
)
from .network import RTCAN, build_model, count_parameters, predict_mask

logger = logging.getLogger(__name__)

HISTORY_FILENAME = "history.jsonl"
CHECKPOINT_DIR = "checkpoints"
BEST_CHECKPOINT = "best.pt"
SCHEMES: tuple[SchemeVariant, ...] = ("A", "B", "C")

# Full-scale Gas-DB numbers (percent); row A is the full model.
REFERENCE_ABLATION = {
    "A": {"accuracy": 76.3404, "iou": 54.4604, "f2": 73.8993},
    "B": {"accuracy": 72.5169, "iou": 52.8349, "f2": 71.1272},
    "C": {"accuracy": 73.3471, "iou": 52.1753, "f2": 71.3597},
}


def config_hash(config: ModelConfig) -> str:
    return canonical_sha256(config)


def set_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def resolve_device(name: str) -> torch.device:
    if name == "cpu":
        return torch.device("cpu")
    if torch.cuda.is_available():
        return torch.device("cuda")
    if getattr(torch.backends, "mps", None) is not None and torch.backends.mps.is_available():
        return torch.device("mps")
    raise ModelConfigError("device 'accelerator' requested but no CUDA or MPS device is available")


def _collate(batch: list[dict]) -> dict:
    return {
        "id": [b["id"] for b in batch],
        "scene": [b["scene"] for b in batch],
        "rgb": torch.stack([b["rgb"] for b in batch]),
        "thermal": torch.stack([b["thermal"] for b in batch]),
        "mask": torch.stack([b["mask"] for b in batch]),
    }


# --- Checkpoints ---

def save_checkpoint(
    model: RTCAN,
    path: str | Path,
    preprocess: PreprocessConfig,
    epoch: int,
    data_manifest_hash: str,
    val_metrics: MetricsReport | None = None,
) -> CheckpointMeta:
    """Write the state-dict archive at `path` and its CheckpointMeta sidecar at `path.json`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = CheckpointMeta(
        format_version=CHECKPOINT_FORMAT_VERSION,
        config=model.config,
        preprocess=preprocess,
        config_hash=config_hash(model.config),
        epoch=epoch,
        val_metrics=val_metrics,
        data_manifest_hash=data_manifest_hash,
    )
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save({"model_state_dict": state, "config_hash": meta.config_hash, "format_version": meta.format_version}, path)
    path.with_suffix(".json").write_text(canonical_json(meta, indent=2), encoding="utf-8")
    logger.info("Saved checkpoint %s (epoch %d)", path, epoch)
    return meta


def read_checkpoint_meta(path: str | Path) -> CheckpointMeta:
    sidecar = Path(path).with_suffix(".json")
    if not sidecar.is_file():
        raise CheckpointError(f"checkpoint sidecar not found: {sidecar}")
    try:
        return CheckpointMeta.model_validate_json(sidecar.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CheckpointError(f"malformed checkpoint sidecar {sidecar}: {e}") from e


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> tuple[RTCAN, CheckpointMeta]:
    """Restore a model. Refuses when the stored architecture hash differs from the expected one."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    meta = read_checkpoint_meta(path)
    if meta.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {meta.format_version!r}")
    if config_hash(meta.config) != meta.config_hash:
        raise ConfigHashMismatchError(f"{path}: sidecar config does not match its recorded hash")
    if expected_config is not None and config_hash(expected_config) != meta.config_hash:
        raise ConfigHashMismatchError(
            f"{path}: checkpoint architecture hash {meta.config_hash[:12]} does not match the requested "
            f"model config {config_hash(expected_config)[:12]}; refusing to load"
        )
    archive = torch.load(path, map_location="cpu", weights_only=True)
    if archive.get("config_hash") != meta.config_hash:
        raise ConfigHashMismatchError(f"{path}: archive and sidecar config hashes differ")
    # stored weights replace any pretrained initialization
    model = build_model(meta.config.model_copy(update={"pretrained_backbone": False}))
    model.config = meta.config
    try:
        model.load_state_dict(archive["model_state_dict"], strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: state dict does not fit the recorded architecture: {e}") from e
    model.eval()
    return model, meta


# --- Evaluation ---

def evaluate_model(
    model: RTCAN,
    manifest: Manifest,
    split: Split | None,
    preprocess: PreprocessConfig,
    batch_size: int = 4,
    device: torch.device | str = "cpu",
    beta: float = 2.0,
) -> EvaluationResult:
    """Eval-mode forward over one split; micro-aggregated report plus per-image and per-scene diagnostics."""
    dataset = GasDBDataset(manifest, split, preprocess, training_mode=False)
    if len(dataset) == 0:
        raise SplitError(f"split {split!r} is empty")
    device = torch.device(device)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, collate_fn=_collate)
    was_training = model.training
    model.to(device).eval()
    per_image: list[ConfusionCounts] = []
    per_scene: dict[str, ConfusionCounts] = {}
    with torch.no_grad():
        for batch in loader:
            pred = predict_mask(model(batch["rgb"].to(device), batch["thermal"].to(device))).cpu()
            for i, scene in enumerate(batch["scene"]):
                counts = confusion(pred[i], batch["mask"][i])
                per_image.append(counts)
                per_scene[scene] = merge(per_scene.get(scene, ConfusionCounts()), counts)
    model.train(was_training)

    counts = merge_all(per_image)
    _, background = class_accuracies(counts)
    return EvaluationResult(
        split=str(split),
        num_images=len(per_image),
        counts=counts,
        report=compute(counts, beta),
        mean_class_accuracy=mean_class_accuracy(counts),
        background_accuracy=background,
        macro=macro_average(per_image, beta),
        per_scene={scene: compute(c, beta) for scene, c in sorted(per_scene.items())},
    )


def evaluate_detailed(
    checkpoint: str | Path,
    manifest: Manifest,
    split: Split,
    expected_config: ModelConfig | None = None,
    batch_size: int = 4,
    device: str = "cpu",
) -> EvaluationResult:
    model, meta = load_checkpoint(checkpoint, expected_config)
    return evaluate_model(model, manifest, split, meta.preprocess, batch_size, resolve_device(device))


def evaluate(
    checkpoint: str | Path,
    manifest: Manifest,
    split: Split,
    expected_config: ModelConfig | None = None,
    batch_size: int = 4,
    device: str = "cpu",
) -> MetricsReport:
    return evaluate_detailed(checkpoint, manifest, split, expected_config, batch_size, device).report


# --- Training ---

def _write_history_line(path: Path, record: EpochRecord) -> None:
    with path.open("a", encoding="utf-8") as f:
        f.write(canonical_json(record) + "\n")


def read_history(path: str | Path) -> TrainHistory:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return TrainHistory(records=[EpochRecord.model_validate_json(line) for line in lines if line.strip()])


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    manifest: Manifest,
    *,
    preprocess: PreprocessConfig | None = None,
    loss_config: LossConfig | None = None,
    output_dir: str | Path | None = None,
    model: RTCAN | None = None,
) -> TrainHistory:
    """SGD with momentum and weight decay on the combined loss, exponential LR decay per epoch,
    validation every epoch and a checkpoint on each improvement of the selection metric.

    Pass `model` to train an existing instance in place (its config must match `model_config`).
    Without `output_dir` nothing is written and records carry no checkpoint path.
    """
    preprocess = preprocess or PreprocessConfig()
    loss_config = loss_config or LossConfig()
    train_ids, val_ids = manifest.ids("train"), manifest.ids("val")
    if not train_ids:
        raise SplitError("manifest has no train entries")
    if not val_ids:
        raise SplitError("manifest has no val entries")

    set_seed(train_config.seed)
    device = resolve_device(train_config.device)
    if model is None:
        model = build_model(model_config)
    elif config_hash(model.config) != config_hash(model_config):
        raise ConfigHashMismatchError("model instance does not match model_config")
    model.to(device)

    out = Path(output_dir) if output_dir is not None else None
    history_path: Optional[Path] = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        history_path = out / HISTORY_FILENAME
        history_path.write_text("", encoding="utf-8")
    data_hash = manifest_sha256(manifest)

    dataset = GasDBDataset(manifest, "train", preprocess, training_mode=True, seed=train_config.seed)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=train_config.lr,
        momentum=train_config.momentum,
        weight_decay=train_config.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=train_config.lr_decay_gamma)
    logger.info(
        "Training scheme %s on %d train / %d val pairs, %d epochs, batch %d, params=%d",
        model_config.scheme, len(train_ids), len(val_ids), train_config.epochs,
        train_config.batch_size, count_parameters(model),
    )

    records: list[EpochRecord] = []
    step_losses: list[float] = []
    best = float("-inf")
    step = 0
    for epoch in range(train_config.epochs):
        dataset.set_epoch(epoch)
        generator = torch.Generator()
        generator.manual_seed(train_config.seed + epoch)
        loader = DataLoader(
            dataset,
            batch_size=train_config.batch_size,
            shuffle=True,
            generator=generator,
            num_workers=train_config.num_workers,
            collate_fn=_collate,
        )
        lr = optimizer.param_groups[0]["lr"]
        model.train()
        epoch_losses: list[float] = []
        for batch in loader:
            rgb, thermal = batch["rgb"].to(device), batch["thermal"].to(device)
            target = batch["mask"].to(device)
            optimizer.zero_grad(set_to_none=True)
            loss = combined_loss(model(rgb, thermal).logits_final, target, loss_config)
            if not torch.isfinite(loss):
                message = f"non-finite loss at epoch {epoch}, step {step}; batch ids {batch['id']}"
                logger.error(message)
                if out is not None:
                    (out / "abort.json").write_text(
                        canonical_json({"epoch": epoch, "step": step, "batch_ids": batch["id"]}, indent=2),
                        encoding="utf-8",
                    )
                raise NonFiniteLossError(message, batch["id"], step, epoch)
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            epoch_losses.append(value)
            step_losses.append(value)
            step += 1
            if train_config.max_steps is not None and step >= train_config.max_steps:
                break
        scheduler.step()

        val = evaluate_model(model, manifest, "val", preprocess, train_config.eval_batch_size, device).report
        score = val.metric(train_config.selection_metric)
        checkpoint_path = None
        if score > best:
            best = score
            if out is not None:
                path = out / CHECKPOINT_DIR / f"epoch_{epoch:03d}.pt"
                save_checkpoint(model, path, preprocess, epoch, data_hash, val)
                checkpoint_path = str(path)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            lr=lr,
            steps=len(epoch_losses),
            val_metrics=val,
            checkpoint_path=checkpoint_path,
        )
        records.append(record)
        if history_path is not None:
            _write_history_line(history_path, record)
        logger.info(
            "epoch %d lr=%.6g loss=%.4f val %s=%.4f%s",
            epoch, lr, record.train_loss, train_config.selection_metric, score,
            " (checkpoint)" if checkpoint_path else "",
        )
        if train_config.max_steps is not None and step >= train_config.max_steps:
            break

    return TrainHistory(records=records, step_losses=step_losses)


def select_best(history: TrainHistory, selection_metric: str = "iou") -> Path:
    """Checkpoint of the epoch with the highest validation metric; ties go to the earliest epoch."""
    if not history.records:
        raise CheckpointError("empty training history")
    best = history.records[0]
    for record in history.records[1:]:
        if record.val_metrics.metric(selection_metric) > best.val_metrics.metric(selection_metric):
            best = record
    if best.checkpoint_path is None:
        raise CheckpointError(f"epoch {best.epoch} has no checkpoint on disk")
    return Path(best.checkpoint_path)


def export_best(history: TrainHistory, output_dir: str | Path, selection_metric: str = "iou") -> Path:
    """Copy the selected checkpoint (and sidecar) to <output_dir>/best.pt."""
    src = select_best(history, selection_metric)
    dst = Path(output_dir) / BEST_CHECKPOINT
    shutil.copyfile(src, dst)
    shutil.copyfile(src.with_suffix(".json"), dst.with_suffix(".json"))
    return dst


# --- Ablation ---

def run_ablation(
    manifest: Manifest,
    base_config: RunConfig,
    schemes: Iterable[SchemeVariant] = SCHEMES,
) -> dict[str, MetricsReport]:
    """Train each scheme under identical seeds and data, then evaluate its best checkpoint on test."""
    if not manifest.ids("test"):
        raise SplitError("ablation needs a nonempty test split")
    preprocess = base_config.data.preprocess_config()
    results: dict[str, MetricsReport] = {}
    for scheme in schemes:
        model_config = base_config.model.model_copy(update={"scheme": scheme})
        out = base_config.output / f"scheme_{scheme}"
        history = train(
            model_config,
            base_config.train,
            manifest,
            preprocess=preprocess,
            loss_config=base_config.loss,
            output_dir=out,
        )
        best = export_best(history, out, base_config.train.selection_metric)
        results[scheme] = evaluate(
            best, manifest, "test", model_config, base_config.train.eval_batch_size, base_config.train.device
        )
        logger.info("Scheme %s test iou=%.4f", scheme, results[scheme].iou)
    return results


def ablation_rows(results: dict[str, MetricsReport]) -> list[dict]:
    rows = []
    for scheme, report in results.items():
        pct = report.as_percent()
        rows.append({"scheme": scheme, "accuracy": pct["accuracy"], "iou": pct["iou"], "f2": pct["f2"]})
    return rows


def format_ablation_table(results: dict[str, MetricsReport]) -> str:
    """Aligned text: one row per scheme, desk-scale numbers next to the full-scale reference."""
    header = f"{'scheme':<8}{'Acc':>10}{'IoU':>10}{'F2':>10}   {'ref Acc':>10}{'ref IoU':>10}{'ref F2':>10}"
    lines = [header, "-" * len(header)]
    for row in ablation_rows(results):
        ref = REFERENCE_ABLATION.get(row["scheme"], {})
        refs = "".join(f"{ref[k]:>10.4f}" if k in ref else f"{'-':>10}" for k in ("accuracy", "iou", "f2"))
        lines.append(f"{row['scheme']:<8}{row['accuracy']:>10.4f}{row['iou']:>10.4f}{row['f2']:>10.4f}   {refs}")
    return "\n".join(lines) + "\n"
