"""Gas-DB layout: manifest IO, pair loading, deterministic splits, preprocessing.

On-disk layout under a dataset root::

    <root>/rgb/<id>.png        8-bit RGB
    <root>/thermal/<id>.png    8-bit single channel
    <root>/mask/<id>.png       8-bit, {0, 255} (255 = gas)
    <root>/manifest.json       {version, seed, entries: [{id, scene, split}]}
"""

from __future__ import annotations

import json
import logging
import math
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import ValidationError
from torch.utils.data import Dataset

from .canonical import canonical_json, canonical_sha256
from .errors import (
    AlignmentError,
    ManifestLoadError,
    ManifestParseError,
    MaskValueError,
    PairLookupError,
    SplitError,
)
from .models import ImagePair, IssueRecord, Manifest, ManifestEntry, PreprocessConfig, Split

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.json"
MODALITIES = ("rgb", "thermal", "mask")


class Sample(NamedTuple):
    """Model-ready arrays for one pair."""
    rgb: torch.Tensor      # 3×H×W float32
    thermal: torch.Tensor  # 1×H×W float32
    mask: torch.Tensor     # H×W int64, {0, 1}
    issues: list[IssueRecord]


def pair_path(root: Path, modality: str, pair_id: str) -> Path:
    return Path(root) / modality / f"{pair_id}.png"


# --- Manifest IO ---

def load_manifest(path: str | Path) -> Manifest:
    """Read manifest.json (or a dataset root containing one) and existence-check every entry."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_FILENAME
    if not p.is_file():
        raise ManifestLoadError(f"manifest not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestParseError(f"{p}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict) or not isinstance(data.get("entries"), list):
        raise ManifestParseError(f"{p}: expected an object with an 'entries' list")

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for i, raw in enumerate(data["entries"]):
        try:
            entry = ManifestEntry.model_validate(raw)
        except ValidationError as e:
            raise ManifestParseError(f"{p}: record {i} is malformed: {e}", record_index=i) from e
        if entry.id in seen:
            raise ManifestParseError(f"{p}: record {i} repeats id {entry.id!r}", record_index=i)
        seen.add(entry.id)
        entries.append(entry)

    root = p.parent
    if data.get("root") is not None:
        if not isinstance(data["root"], str):
            raise ManifestParseError(f"{p}: root must be a path string")
        root = (p.parent / data["root"]).resolve()
    for entry in entries:
        for modality in MODALITIES:
            f = pair_path(root, modality, entry.id)
            if not f.is_file():
                raise ManifestLoadError(f"pair {entry.id!r}: missing {modality} file {f}", pair_id=entry.id)

    seed = data.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ManifestParseError(f"{p}: seed must be an integer or null")
    version = data.get("version", 1)
    if isinstance(version, bool) or not isinstance(version, int):
        raise ManifestParseError(f"{p}: version must be an integer, got {version!r}")
    manifest = Manifest(root=root, entries=entries, seed=seed, version=version)
    logger.info("Loaded manifest %s: %d entries", p, len(entries))
    return manifest


def manifest_payload(manifest: Manifest) -> dict:
    entries = sorted(manifest.entries, key=lambda e: e.id)
    return {
        "version": manifest.version,
        "seed": manifest.seed,
        "entries": [e.model_dump() for e in entries],
    }


def write_manifest(manifest: Manifest, path: str | Path | None = None) -> Path:
    """Write byte-stable manifest JSON (sorted ids and keys). Defaults to <root>/manifest.json.

    Written anywhere else, the file records the absolute dataset root so it still resolves.
    """
    out = Path(path) if path is not None else Path(manifest.root) / MANIFEST_FILENAME
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = manifest_payload(manifest)
    root = Path(manifest.root).resolve()
    if out.parent.resolve() != root:
        payload["root"] = str(root)
    out.write_text(canonical_json(payload, indent=2), encoding="utf-8")
    return out


def manifest_sha256(manifest: Manifest) -> str:
    return canonical_sha256(manifest_payload(manifest))


# --- Pairs ---

def save_pair(root: str | Path, pair: ImagePair) -> None:
    """Write the three PNGs of a pair; mask goes to disk as {0, 255}."""
    root = Path(root)
    for modality in MODALITIES:
        (root / modality).mkdir(parents=True, exist_ok=True)
    Image.fromarray(pair.rgb).save(pair_path(root, "rgb", pair.id))
    Image.fromarray(np.ascontiguousarray(pair.thermal[:, :, 0])).save(pair_path(root, "thermal", pair.id))
    Image.fromarray((pair.mask[:, :, 0] * 255).astype(np.uint8)).save(pair_path(root, "mask", pair.id))


def _read_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode), dtype=np.uint8)


def load_pair(manifest: Manifest, pair_id: str) -> ImagePair:
    """Decode one pair; mask {0,255} is normalized to {0,1}."""
    entry = next((e for e in manifest.entries if e.id == pair_id), None)
    if entry is None:
        raise PairLookupError(f"unknown pair id {pair_id!r}")
    rgb = _read_png(pair_path(manifest.root, "rgb", pair_id), "RGB")
    thermal = _read_png(pair_path(manifest.root, "thermal", pair_id), "L")
    mask = _read_png(pair_path(manifest.root, "mask", pair_id), "L")

    if not (rgb.shape[:2] == thermal.shape[:2] == mask.shape[:2]):
        raise AlignmentError(
            f"pair {pair_id!r}: rgb {rgb.shape[:2]}, thermal {thermal.shape[:2]}, mask {mask.shape[:2]} are not aligned"
        )
    bad = np.setdiff1d(np.unique(mask), np.array([0, 255], dtype=np.uint8))
    if bad.size:
        raise MaskValueError(f"pair {pair_id!r}: mask is not binary, found values {bad.tolist()[:8]}")

    return ImagePair(
        id=pair_id,
        scene=entry.scene,
        rgb=rgb,
        thermal=thermal[:, :, None],
        mask=(mask == 255).astype(np.uint8)[:, :, None],
    )


# --- Splits ---

def make_split(
    manifest: Manifest,
    train_fraction: float = 0.8,
    val_fraction_of_train: float = 0.1,
    seed: int = 0,
) -> Manifest:
    """Seeded shuffle; floor(n·train_fraction) go to train∪val (val is the tail of that block), rest to test."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not 0.0 <= val_fraction_of_train < 1.0:
        raise SplitError(f"val_fraction_of_train must be in [0, 1), got {val_fraction_of_train}")
    n = len(manifest.entries)
    min_n = 3 if val_fraction_of_train > 0 else 2
    if n < min_n:
        raise SplitError(f"cannot split {n} entries into nonempty parts (need at least {min_n})")

    ids = sorted(manifest.ids())
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]

    # exact decimal arithmetic: 0.8·10 is 8, not 7.999...
    n_train_val = math.floor(n * Fraction(str(train_fraction)))
    n_val = math.floor(n_train_val * Fraction(str(val_fraction_of_train)) + Fraction(1, 2))
    if val_fraction_of_train > 0:
        n_val = max(1, n_val)
    n_train = n_train_val - n_val
    if n_train < 1:
        raise SplitError(
            f"split of {n} entries leaves no training items (train_fraction={train_fraction}, "
            f"val_fraction_of_train={val_fraction_of_train})"
        )

    labels: dict[str, Split] = {}
    for pos, pair_id in enumerate(shuffled):
        if pos < n_train:
            labels[pair_id] = "train"
        elif pos < n_train_val:
            labels[pair_id] = "val"
        else:
            labels[pair_id] = "test"

    entries = [e.model_copy(update={"split": labels[e.id]}) for e in sorted(manifest.entries, key=lambda e: e.id)]
    logger.info("Split %d entries (seed=%d): train=%d val=%d test=%d", n, seed, n_train, n_val, n - n_train_val)
    return manifest.model_copy(update={"entries": entries, "seed": seed})


# --- Preprocessing ---

def normalize_rgb(rgb: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """H×W×3 uint8 -> 3×H×W float32 standardized per channel."""
    x = rgb.astype(np.float32) / 255.0
    mean = np.asarray(config.rgb_mean, dtype=np.float32)
    std = np.asarray(config.rgb_std, dtype=np.float32)
    return np.ascontiguousarray(((x - mean) / std).transpose(2, 0, 1))


def normalize_thermal(
    thermal: np.ndarray,
    config: PreprocessConfig,
    location: str = "thermal",
) -> tuple[np.ndarray, list[IssueRecord]]:
    """H×W×1 uint8 -> 1×H×W float32. A constant image under per-image-minmax becomes zeros plus a warning."""
    t = thermal.reshape(thermal.shape[0], thermal.shape[1]).astype(np.float64)
    issues: list[IssueRecord] = []
    if config.thermal_normalization == "fixed-mean-std":
        out = (t / 255.0 - config.thermal_mean) / config.thermal_std
    else:
        lo, hi = float(t.min()), float(t.max())
        if hi <= lo:
            issue = IssueRecord(
                severity="warning",
                type="degenerate_thermal",
                location=location,
                message=f"thermal image is constant ({lo:.0f}); normalized plane set to zeros",
            )
            logger.warning("%s: %s", location, issue.message)
            issues.append(issue)
            out = np.zeros_like(t)
        else:
            # unit range, zero mean
            out = (t - t.mean()) / (hi - lo)
    return out.astype(np.float32)[None, :, :], issues


def _resize(x: torch.Tensor, size: tuple[int, int], mode: str) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == "nearest":
        return F.interpolate(x[None], size=size, mode="nearest")[0]
    return F.interpolate(x[None], size=size, mode="bilinear", align_corners=False)[0]


def preprocess(
    pair: ImagePair,
    config: PreprocessConfig,
    training_mode: bool = False,
    seed: int = 0,
) -> Sample:
    """Normalize, resize to target_size (bilinear images, nearest mask), joint random hflip in training mode."""
    rgb = torch.from_numpy(normalize_rgb(pair.rgb, config))
    thermal_arr, issues = normalize_thermal(pair.thermal, config, location=f"pair:{pair.id}")
    thermal = torch.from_numpy(thermal_arr)
    mask = torch.from_numpy(pair.mask[:, :, 0].astype(np.float32))[None]

    size = (int(config.target_size[0]), int(config.target_size[1]))
    rgb = _resize(rgb, size, "bilinear")
    thermal = _resize(thermal, size, "bilinear")
    mask = _resize(mask, size, "nearest")[0].round().to(torch.int64)

    rng = np.random.default_rng(seed)
    if training_mode and rng.random() < config.hflip_prob:
        rgb = torch.flip(rgb, dims=[-1])
        thermal = torch.flip(thermal, dims=[-1])
        mask = torch.flip(mask, dims=[-1])

    return Sample(rgb=rgb.contiguous(), thermal=thermal.contiguous(), mask=mask.contiguous(), issues=issues)


def sample_seed(seed: int, epoch: int, index: int) -> int:
    """Per-sample seed; independent of worker scheduling."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


class GasDBDataset(Dataset):
    """One split of a manifest as a torch Dataset of {id, rgb, thermal, mask} dicts."""

    def __init__(
        self,
        manifest: Manifest,
        split: Split | None,
        config: PreprocessConfig,
        training_mode: bool = False,
        seed: int = 0,
    ) -> None:
        self.manifest = manifest
        self.ids = sorted(manifest.ids(split))
        self.config = config
        self.training_mode = training_mode
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> dict:
        pair = load_pair(self.manifest, self.ids[index])
        s = preprocess(pair, self.config, self.training_mode, sample_seed(self.seed, self.epoch, index))
        return {"id": pair.id, "scene": pair.scene, "rgb": s.rgb, "thermal": s.thermal, "mask": s.mask}
