"""Pydantic models for rtcan: dataset records, synthetic scene parameters, configs, reports."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    model_validator,
)

from .canonical import MANIFEST_VERSION

Scene = Literal[
    "sunny", "rainy", "double", "near", "far", "overlook", "simple-bg", "complex-bg", "synthetic",
]
Split = Literal["train", "val", "test", "unassigned"]
SchemeVariant = Literal["A", "B", "C"]
Difficulty = Literal["easy", "hard"]


class _Strict(BaseModel):
    """Config-style model: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


# --- Issues (soft problems reported alongside results) ---

class IssueRecord(BaseModel):
    severity: Literal["warning", "blocking"]
    type: str
    location: str
    message: str


# --- gasdb-data ---

class ImagePair(BaseModel):
    """One aligned rgb (H×W×3) / thermal (H×W×1) / mask (H×W×1, {0,1}) record. All uint8."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str
    scene: Scene
    rgb: np.ndarray
    thermal: np.ndarray
    mask: np.ndarray

    @model_validator(mode="after")
    def _check_arrays(self) -> "ImagePair":
        for name, arr, channels in (("rgb", self.rgb, 3), ("thermal", self.thermal, 1), ("mask", self.mask, 1)):
            if arr.dtype != np.uint8:
                raise ValueError(f"{name} must be uint8, got {arr.dtype}")
            if arr.ndim != 3 or arr.shape[2] != channels:
                raise ValueError(f"{name} must be H×W×{channels}, got {arr.shape}")
        if not (self.rgb.shape[:2] == self.thermal.shape[:2] == self.mask.shape[:2]):
            raise ValueError(
                f"rgb {self.rgb.shape[:2]}, thermal {self.thermal.shape[:2]}, mask {self.mask.shape[:2]} differ"
            )
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("mask must hold only {0, 1}")
        return self

    @property
    def height(self) -> int:
        return int(self.rgb.shape[0])

    @property
    def width(self) -> int:
        return int(self.rgb.shape[1])


class ManifestEntry(_Strict):
    id: str = Field(min_length=1)
    scene: Scene
    split: Split = "unassigned"


class Manifest(BaseModel):
    """Dataset index. `root` locates the files and is not part of manifest.json."""
    model_config = ConfigDict(frozen=True)

    root: Path
    entries: list[ManifestEntry] = Field(default_factory=list)
    seed: Optional[int] = None
    version: int = MANIFEST_VERSION

    @model_validator(mode="after")
    def _unique_ids(self) -> "Manifest":
        seen: set[str] = set()
        for e in self.entries:
            if e.id in seen:
                raise ValueError(f"duplicate id {e.id!r} in manifest")
            seen.add(e.id)
        return self

    def ids(self, split: Split | None = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]

    @property
    def has_splits(self) -> bool:
        return any(e.split != "unassigned" for e in self.entries)


class PreprocessConfig(_Strict):
    target_size: tuple[PositiveInt, PositiveInt] = (512, 640)  # (H, W)
    rgb_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    rgb_std: tuple[PositiveFloat, PositiveFloat, PositiveFloat] = (0.229, 0.224, 0.225)
    thermal_normalization: Literal["per-image-minmax", "fixed-mean-std"] = "per-image-minmax"
    thermal_mean: float = 0.5  # fixed-mean-std only, on the [0,1] scale
    thermal_std: PositiveFloat = 0.25
    hflip_prob: float = Field(default=0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_size(self) -> "PreprocessConfig":
        h, w = self.target_size
        if h % 32 or w % 32:
            raise ValueError(f"target_size {self.target_size} must be divisible by 32")
        return self


class DataConfig(PreprocessConfig):
    """The `data` section of a run config: preprocessing plus where the data lives and how to split it."""
    manifest: Path
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    val_fraction_of_train: float = Field(default=0.1, ge=0.0, lt=1.0)
    split_seed: int = 0

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig.model_validate(self.model_dump(include=set(PreprocessConfig.model_fields)))


# --- synth-plume ---

class Puff(_Strict):
    center: tuple[float, float]  # (row, col) px
    sigma: PositiveFloat
    amplitude: float = Field(ge=0.0)


class PlumeParams(_Strict):
    puffs: list[Puff] = Field(default_factory=list)
    absorption_k: PositiveFloat = 1.5
    gas_level: float = Field(default=0.12, ge=0.0, le=1.0)
    mask_threshold: PositiveFloat = 0.5


class Distractor(_Strict):
    shape: Literal["rect", "disk"]
    darkness: float = Field(ge=0.0, le=1.0)
    position: tuple[NonNegativeInt, NonNegativeInt]  # top-left (row, col)
    size: tuple[PositiveInt, PositiveInt]  # bounding box (h, w)


class SceneParams(_Strict):
    size: tuple[NonNegativeInt, NonNegativeInt]  # (H, W)
    background_style: Literal["gradient", "perlin-like", "blocks"] = "gradient"
    distractors: list[Distractor] = Field(default_factory=list)
    rng_seed: int = 0

    @model_validator(mode="after")
    def _distractors_in_bounds(self) -> "SceneParams":
        h, w = self.size
        for i, d in enumerate(self.distractors):
            r, c = d.position
            dh, dw = d.size
            if r + dh > h or c + dw > w:
                raise ValueError(f"distractor {i} at {d.position} size {d.size} exceeds image {self.size}")
        return self


# --- rtcan-model ---

class ModelConfig(_Strict):
    backbone_depth: int = 50  # 50 or 152; checked by build_model
    rgb_in_channels: Literal[3] = 3
    thermal_in_channels: Literal[1] = 1
    num_classes: Literal[2] = 2
    scheme: SchemeVariant = "A"
    pretrained_backbone: bool = False
    gta_kernel_sizes: list[int] = Field(default_factory=lambda: [1, 3, 5], min_length=1)
    gta_global_branch: bool = True
    gta_branch_channels: PositiveInt = 256
    gta_placement: Literal["deepest", "per_stage"] = "deepest"
    attention_order: Literal["channel_first", "spatial_first"] = "channel_first"
    attention_reduction: PositiveInt = 16
    spatial_kernel_size: PositiveInt = 7
    decoder_channels: PositiveInt = 64
    init_seed: int = 0


# --- losses ---

class LossConfig(_Strict):
    dice_weight: float = Field(default=0.5, ge=0.0, le=1.0)
    sce_weight: float = Field(default=0.5, ge=0.0, le=1.0)
    label_smoothing: float = Field(default=0.1, ge=0.0, lt=0.5)
    dice_epsilon: PositiveFloat = 1.0

    @model_validator(mode="after")
    def _weights_sum_to_one(self) -> "LossConfig":
        if abs(self.dice_weight + self.sce_weight - 1.0) > 1e-9:
            raise ValueError(f"dice_weight + sce_weight must be 1, got {self.dice_weight + self.sce_weight}")
        return self


# --- metrics ---

class ConfusionCounts(BaseModel):
    """Pixel-level confusion counts; gas is the positive class."""
    model_config = ConfigDict(frozen=True)

    tp: NonNegativeInt = 0
    tn: NonNegativeInt = 0
    fp: NonNegativeInt = 0
    fn: NonNegativeInt = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


class MetricsReport(BaseModel):
    accuracy: float = Field(ge=0.0, le=1.0)
    iou: float = Field(ge=0.0, le=1.0)
    f2: float = Field(ge=0.0, le=1.0)
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    beta: PositiveFloat = 2.0
    conventions: dict[str, str] = Field(default_factory=dict)

    def as_percent(self) -> dict:
        """Table style: metric values ×100 rounded to 4 decimals (e.g. 76.3404)."""
        out = self.model_dump()
        for key in ("accuracy", "iou", "f2", "precision", "recall"):
            out[key] = round(out[key] * 100.0, 4)
        return out

    def metric(self, name: str) -> float:
        return float(getattr(self, name))


class EvaluationResult(BaseModel):
    """Headline report plus diagnostics that are not part of the report schema."""
    split: str
    num_images: int
    counts: ConfusionCounts
    report: MetricsReport
    mean_class_accuracy: float
    background_accuracy: float
    macro: dict[str, float] = Field(default_factory=dict)  # per-image averages
    per_scene: dict[str, MetricsReport] = Field(default_factory=dict)


# --- train-eval ---

class TrainConfig(_Strict):
    epochs: PositiveInt = 50
    batch_size: PositiveInt = 4
    lr: PositiveFloat = 0.02
    momentum: PositiveFloat = 0.9
    weight_decay: PositiveFloat = 0.0005
    lr_decay_gamma: float = Field(default=0.95, gt=0.0, lt=1.0)
    seed: int = 0
    device: Literal["cpu", "accelerator"] = "cpu"
    selection_metric: Literal["iou", "f2"] = "iou"
    max_steps: Optional[PositiveInt] = None
    eval_batch_size: PositiveInt = 4
    num_workers: NonNegativeInt = 0


class EpochRecord(BaseModel):
    epoch: NonNegativeInt
    train_loss: float
    lr: float
    steps: NonNegativeInt
    val_metrics: MetricsReport
    checkpoint_path: Optional[str] = None  # set only on improvement of the selection metric


class TrainHistory(BaseModel):
    records: list[EpochRecord] = Field(default_factory=list)
    step_losses: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _epochs_increasing(self) -> "TrainHistory":
        epochs = [r.epoch for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"epochs must be strictly increasing, got {epochs}")
        return self


class CheckpointMeta(BaseModel):
    """Sidecar JSON written next to every checkpoint archive."""
    format_version: str
    config: ModelConfig
    preprocess: PreprocessConfig
    config_hash: str
    epoch: int
    val_metrics: Optional[MetricsReport] = None
    data_manifest_hash: str


class RunConfig(_Strict):
    """The structured run-config file: data / model / train / loss sections plus output dir."""
    data: DataConfig
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    output: Path
