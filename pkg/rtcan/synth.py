"""Synthetic RGB-thermal gas scenes.

Gas is composited into the thermal channel only, through a Beer-Lambert style
transmittance tau = exp(-k·c) over a Gaussian-puff concentration field c.
RGB depends on SceneParams alone, so plume parameters never leak into it.
Distractors are dark in thermal and drawn as visible objects in RGB.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from .dataset import save_pair, write_manifest
from .errors import ShapeError, SynthParameterError
from .models import (
    Difficulty,
    Distractor,
    ImagePair,
    Manifest,
    ManifestEntry,
    PlumeParams,
    Puff,
    SceneParams,
)

logger = logging.getLogger(__name__)

DEFAULT_SIZE = (128, 160)  # (H, W); 512×640 aspect at desk scale
_EDGE_RGB = np.array([235.0, 235.0, 225.0])


class SceneRender(NamedTuple):
    rgb: np.ndarray                 # H×W×3 uint8
    thermal_bg: np.ndarray          # H×W×1 float64 in [0, 1]
    distractor_regions: np.ndarray  # H×W uint8 {0, 1}


class SyntheticSample(NamedTuple):
    pair: ImagePair
    scene: SceneParams
    plume: PlumeParams
    concentration: np.ndarray
    thermal_bg: np.ndarray
    distractor_regions: np.ndarray


# --- Scene ---

def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: Sequence[int] = (4, 8, 16)) -> np.ndarray:
    """Octave value noise in [0, 1]: coarse random grids, bilinearly upsampled and summed."""
    out = np.zeros((h, w), dtype=np.float64)
    weight_sum = 0.0
    for k, cell in enumerate(cells):
        gh, gw = max(2, -(-h // cell) + 1), max(2, -(-w // cell) + 1)
        coarse = rng.random((gh, gw)).astype(np.float32)
        up = np.asarray(Image.fromarray(coarse).resize((w, h), Image.Resampling.BILINEAR), dtype=np.float64)
        weight = 0.5 ** k
        out += weight * up
        weight_sum += weight
    out /= weight_sum
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _region(d: Distractor, h: int, w: int) -> np.ndarray:
    r0, c0 = d.position
    dh, dw = d.size
    region = np.zeros((h, w), dtype=bool)
    if d.shape == "rect":
        region[r0:r0 + dh, c0:c0 + dw] = True
        return region
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    cy, cx = r0 + (dh - 1) / 2.0, c0 + (dw - 1) / 2.0
    ry, rx = dh / 2.0, dw / 2.0
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def _boundary(region: np.ndarray) -> np.ndarray:
    interior = region.copy()
    interior[1:, :] &= region[:-1, :]
    interior[:-1, :] &= region[1:, :]
    interior[:, 1:] &= region[:, :-1]
    interior[:, :-1] &= region[:, 1:]
    interior[0, :] = interior[-1, :] = False
    interior[:, 0] = interior[:, -1] = False
    return region & ~interior


def render_scene(params: SceneParams) -> SceneRender:
    """Background thermal radiance, matching RGB scene and the distractor map. Deterministic in rng_seed."""
    h, w = params.size
    if h == 0 or w == 0:
        raise SynthParameterError(f"scene size {params.size} has zero area")
    rng = np.random.default_rng(params.rng_seed)
    rows = np.arange(h, dtype=np.float64)[:, None]
    ramp = rows / max(h - 1, 1)

    top = rng.uniform(90.0, 200.0, size=3)
    bottom = rng.uniform(40.0, 160.0, size=3)
    rgb = top + (bottom - top) * ramp[:, :, None] * np.ones((1, w, 1))

    if params.background_style == "gradient":
        lo = rng.uniform(0.45, 0.6)
        hi = lo + rng.uniform(0.15, 0.3)
        thermal = np.broadcast_to(lo + (hi - lo) * ramp, (h, w)).copy()
    elif params.background_style == "perlin-like":
        noise = _smooth_noise(rng, h, w)
        thermal = 0.45 + 0.35 * noise
        tint = rng.uniform(-40.0, 40.0, size=3)
        rgb = rgb + (noise[:, :, None] - 0.5) * tint
    else:  # blocks
        base = rng.uniform(0.5, 0.65)
        thermal = np.full((h, w), base)
        for _ in range(int(rng.integers(4, 9))):
            bh, bw = int(rng.integers(max(1, h // 8), max(2, h // 2))), int(rng.integers(max(1, w // 8), max(2, w // 2)))
            r0, c0 = int(rng.integers(0, max(1, h - bh))), int(rng.integers(0, max(1, w - bw)))
            thermal[r0:r0 + bh, c0:c0 + bw] = base + rng.uniform(-0.1, 0.15)
            rgb[r0:r0 + bh, c0:c0 + bw] = rng.uniform(50.0, 210.0, size=3)

    rgb = rgb + rng.normal(0.0, 3.0, size=(h, w, 3))
    regions = np.zeros((h, w), dtype=bool)
    checker = ((np.arange(h)[:, None] // 3 + np.arange(w)[None, :] // 3) % 2).astype(np.float64)
    for d in params.distractors:
        region = _region(d, h, w)
        thermal[region] *= 1.0 - d.darkness
        color = rng.uniform(25.0, 110.0, size=3)
        rgb[region] = color + 18.0 * checker[region][:, None]
        rgb[_boundary(region)] = _EDGE_RGB
        regions |= region

    return SceneRender(
        rgb=np.clip(np.rint(rgb), 0, 255).astype(np.uint8),
        thermal_bg=np.clip(thermal, 0.0, 1.0)[:, :, None],
        distractor_regions=regions.astype(np.uint8),
    )


# --- Plume ---

def render_concentration(puffs: Sequence[Puff], size: tuple[int, int]) -> np.ndarray:
    """c = Σ amplitude·exp(-‖x - center‖² / (2·sigma²)) on the pixel grid. H×W float64, ≥ 0."""
    h, w = size
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    c = np.zeros((h, w), dtype=np.float64)
    for p in puffs:
        if p.sigma <= 0 or p.amplitude < 0:
            raise SynthParameterError(f"invalid puff {p}")
        d2 = (rows - p.center[0]) ** 2 + (cols - p.center[1]) ** 2
        c += p.amplitude * np.exp(-d2 / (2.0 * p.sigma ** 2))
    return c


def composite(
    thermal_bg: np.ndarray,
    c: np.ndarray,
    absorption_k: float,
    gas_level: float,
    quantize: bool = True,
) -> np.ndarray:
    """out = tau·thermal_bg + (1 - tau)·gas_level with tau = exp(-k·c); H×W×1, uint8 when quantized."""
    bg = thermal_bg[:, :, 0] if thermal_bg.ndim == 3 else thermal_bg
    if bg.shape != c.shape:
        raise ShapeError(f"thermal_bg {bg.shape} and concentration {c.shape} differ")
    tau = np.exp(-absorption_k * c)
    out = tau * bg + (1.0 - tau) * gas_level
    if quantize:
        return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)[:, :, None]
    return out[:, :, None]


def make_mask(c: np.ndarray, mask_threshold: float) -> np.ndarray:
    if mask_threshold <= 0:
        raise SynthParameterError(f"mask_threshold must be positive, got {mask_threshold}")
    return (c > mask_threshold).astype(np.uint8)


# --- Dataset ---

def _clamp_box(r: float, c: float, bh: int, bw: int, h: int, w: int) -> tuple[int, int]:
    return int(np.clip(round(r), 0, h - bh)), int(np.clip(round(c), 0, w - bw))


def sample_scene(
    index: int,
    seed: int,
    difficulty: Difficulty,
    size: tuple[int, int] = DEFAULT_SIZE,
) -> tuple[SceneParams, PlumeParams]:
    """Scene and plume parameters for item `index` of a generated dataset."""
    h, w = size
    rng = np.random.default_rng([seed, index])
    style = str(rng.choice(["gradient", "perlin-like", "blocks"]))
    short = min(h, w)

    # integer anchor so the main puff peaks exactly on a pixel
    anchor = (int(rng.integers(int(0.25 * h), int(0.75 * h) + 1)), int(rng.integers(int(0.25 * w), int(0.75 * w) + 1)))
    main_sigma = float(rng.uniform(0.07, 0.12) * short)
    puffs = [Puff(center=(float(anchor[0]), float(anchor[1])), sigma=main_sigma, amplitude=float(rng.uniform(1.5, 3.0)))]
    for _ in range(int(rng.integers(0, 3))):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        dist = rng.uniform(0.6, 1.4) * main_sigma
        puffs.append(Puff(
            center=(anchor[0] + dist * np.sin(angle), anchor[1] + dist * np.cos(angle)),
            sigma=float(main_sigma * rng.uniform(0.5, 0.9)),
            amplitude=float(rng.uniform(0.6, 1.5)),
        ))
    plume = PlumeParams(
        puffs=puffs,
        absorption_k=float(rng.uniform(1.2, 2.0)),
        gas_level=float(rng.uniform(0.05, 0.2)),
        mask_threshold=0.5,
    )

    distractors: list[Distractor] = []
    if difficulty == "hard":
        # one touching the plume, one in the opposite half of the frame, maybe one more anywhere
        side = int(rng.integers(int(1.6 * main_sigma), int(2.6 * main_sigma) + 1))
        side = max(2, min(side, h // 2, w // 2))
        angle = rng.uniform(0.0, 2.0 * np.pi)
        dist = 1.6 * main_sigma
        pos = _clamp_box(anchor[0] + dist * np.sin(angle) - side / 2, anchor[1] + dist * np.cos(angle) - side / 2, side, side, h, w)
        distractors.append(Distractor(shape=str(rng.choice(["rect", "disk"])), darkness=float(rng.uniform(0.5, 0.75)), position=pos, size=(side, side)))

        far_side = max(2, min(int(rng.integers(max(2, short // 8), max(3, short // 4) + 1)), h // 2, w // 2))
        far_col = w - far_side - 2 if anchor[1] < w / 2 else 2
        far_row = float(rng.uniform(0, h - far_side))
        distractors.append(Distractor(
            shape=str(rng.choice(["rect", "disk"])),
            darkness=float(rng.uniform(0.5, 0.75)),
            position=_clamp_box(far_row, far_col, far_side, far_side, h, w),
            size=(far_side, far_side),
        ))
        if rng.random() < 0.5:
            bh, bw = max(2, short // 6), max(2, short // 4)
            distractors.append(Distractor(
                shape="rect",
                darkness=float(rng.uniform(0.4, 0.7)),
                position=_clamp_box(rng.uniform(0, h - bh), rng.uniform(0, w - bw), bh, bw, h, w),
                size=(bh, bw),
            ))

    scene = SceneParams(
        size=(h, w),
        background_style=style,
        distractors=distractors,
        rng_seed=int(rng.integers(0, 2**31 - 1)),
    )
    return scene, plume


def render_sample(
    index: int,
    seed: int,
    difficulty: Difficulty,
    size: tuple[int, int] = DEFAULT_SIZE,
) -> SyntheticSample:
    scene, plume = sample_scene(index, seed, difficulty, size)
    return compose_sample(f"synth_{index:05d}", scene, plume)


def compose_sample(pair_id: str, scene: SceneParams, plume: PlumeParams) -> SyntheticSample:
    """Render `scene` and composite `plume` into its thermal band only."""
    rendered = render_scene(scene)
    c = render_concentration(plume.puffs, scene.size)
    thermal = composite(rendered.thermal_bg, c, plume.absorption_k, plume.gas_level)
    mask = make_mask(c, plume.mask_threshold)
    pair = ImagePair(
        id=pair_id,
        scene="synthetic",
        rgb=rendered.rgb,
        thermal=thermal,
        mask=mask[:, :, None],
    )
    return SyntheticSample(
        pair=pair,
        scene=scene,
        plume=plume,
        concentration=c,
        thermal_bg=rendered.thermal_bg,
        distractor_regions=rendered.distractor_regions,
    )


def generate_dataset(
    n: int,
    out_dir: str | Path,
    seed: int = 0,
    difficulty: Difficulty = "easy",
    size: tuple[int, int] = DEFAULT_SIZE,
) -> Manifest:
    """Write n synthetic pairs plus manifest.json in the Gas-DB layout."""
    if n < 1:
        raise SynthParameterError(f"n must be at least 1, got {n}")
    if size[0] < 8 or size[1] < 8:
        raise SynthParameterError(f"size {size} too small for a plume scene")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    for i in range(n):
        sample = render_sample(i, seed, difficulty, size)
        save_pair(out, sample.pair)
        entries.append(ManifestEntry(id=sample.pair.id, scene="synthetic"))
    manifest = Manifest(root=out, entries=entries, seed=seed)
    path = write_manifest(manifest)
    logger.info("Generated %d %s pairs at %dx%d under %s", n, difficulty, size[1], size[0], path.parent)
    return manifest
