"""Image ingestion, zero-pad/crop geometry, splits, and synthetic vessels.

Images live as float32 H x W x 3 arrays in [0,1], masks as strictly-binary
H x W x 1 arrays. Loading pads both members of a pair to the dataset's target
size (zero fill, split evenly with the odd remainder going bottom/right);
cropping back to the original size inverts the padding exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ShapeError

IMAGE_SUFFIXES = (".png", ".ppm")
MASK_SUFFIXES = (".png", ".pgm")


@dataclass
class Sample:
    """One padded image/mask pair plus the geometry needed to undo the pad."""

    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], padded
    mask: np.ndarray   # (H, W, 1) float32 in {0, 1}, padded
    original_size: tuple[int, int]
    padded_size: tuple[int, int]


@dataclass
class DatasetSpec:
    name: str
    samples: list[Sample] = field(default_factory=list)
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    pad_size: tuple[int, int] = (0, 0)

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def train_samples(self) -> list[Sample]:
        return [self.by_id(i) for i in self.train_ids]

    def test_samples(self) -> list[Sample]:
        return [self.by_id(i) for i in self.test_ids]


# ---------------------------------------------------------------------------
# geometry


def pad_to(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Zero-pad H,W up to target; margins split evenly, remainder bottom/right."""
    h, w = img.shape[:2]
    th, tw = target
    if th < h or tw < w:
        raise ShapeError(f"pad target {target} smaller than image {h}x{w}")
    top = (th - h) // 2
    left = (tw - w) // 2
    pad = [(top, th - h - top), (left, tw - w - left)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad)


def crop_to(img: np.ndarray, original: tuple[int, int]) -> np.ndarray:
    """Exact inverse of pad_to for the same original size."""
    h, w = img.shape[:2]
    oh, ow = original
    if oh > h or ow > w:
        raise ShapeError(f"crop target {original} larger than image {h}x{w}")
    top = (h - oh) // 2
    left = (w - ow) // 2
    return img[top:top + oh, left:left + ow].copy()


# ---------------------------------------------------------------------------
# file I/O


def load_image(path) -> np.ndarray:
    """8-bit PNG or PPM to float32 (H, W, 3) scaled into [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ConfigError(f"unsupported image format {path.suffix!r} for {path.name}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    """8-bit grayscale PNG or PGM binarized at mid-gray to float32 (H, W, 1)."""
    path = Path(path)
    if path.suffix.lower() not in MASK_SUFFIXES:
        raise ConfigError(f"unsupported mask format {path.suffix!r} for {path.name}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return (arr > 127.5).astype(np.float32)[..., None]


def _find_by_stem(directory: Path, stem: str, suffixes) -> Path:
    for suffix in suffixes:
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no file {stem}{{{','.join(suffixes)}}} in {directory}")


def load_dataset(manifest_path) -> DatasetSpec:
    """Read a manifest JSON and its images/ and masks/ siblings, pre-padded."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    for key in ("name", "pad_h", "pad_w", "train_ids", "test_ids"):
        if key not in manifest:
            raise ConfigError(f"manifest missing key {key!r}")
    pad_size = (int(manifest["pad_h"]), int(manifest["pad_w"]))
    if pad_size[0] % 8 or pad_size[1] % 8:
        raise ConfigError(f"pad target {pad_size} must be divisible by 8")
    root = manifest_path.parent
    ds = DatasetSpec(name=manifest["name"],
                     train_ids=list(manifest["train_ids"]),
                     test_ids=list(manifest["test_ids"]),
                     pad_size=pad_size)
    for sample_id in ds.train_ids + ds.test_ids:
        image = load_image(_find_by_stem(root / "images", sample_id, IMAGE_SUFFIXES))
        mask = load_mask(_find_by_stem(root / "masks", sample_id, MASK_SUFFIXES))
        if image.shape[:2] != mask.shape[:2]:
            raise ShapeError(
                f"{sample_id}: image {image.shape[:2]} and mask {mask.shape[:2]} differ")
        original = image.shape[:2]
        ds.samples.append(Sample(
            id=sample_id,
            image=pad_to(image, pad_size),
            mask=pad_to(mask, pad_size),  # pad pixels count as background
            original_size=original,
            padded_size=pad_size,
        ))
    return ds


def save_dataset(ds: DatasetSpec, directory) -> Path:
    """Write images/, masks/, and manifest.json; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        image = crop_to(s.image, s.original_size)
        mask = crop_to(s.mask, s.original_size)
        Image.fromarray(np.rint(image * 255).astype(np.uint8), mode="RGB").save(
            directory / "images" / f"{s.id}.png")
        Image.fromarray((mask[..., 0] * 255).astype(np.uint8), mode="L").save(
            directory / "masks" / f"{s.id}.png")
    manifest = {
        "name": ds.name,
        "pad_h": ds.pad_size[0],
        "pad_w": ds.pad_size[1],
        "train_ids": ds.train_ids,
        "test_ids": ds.test_ids,
    }
    manifest_path = directory / "manifest.json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest_path


# ---------------------------------------------------------------------------
# splits


def split_samples(samples, seed: int, validation_count: int):
    """Seeded uniform choice without replacement; returns (train, val) lists."""
    n = len(samples)
    if validation_count >= n:
        raise ConfigError(f"validation_count {validation_count} must be < dataset size {n}")
    rng = np.random.default_rng(seed)
    val_idx = set(rng.choice(n, size=validation_count, replace=False).tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# synthetic vessels


def _disk_offsets(radius: float):
    r = int(np.ceil(radius))
    offsets = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx <= radius * radius + 1e-6:
                offsets.append((dy, dx))
    return offsets


def _stamp(canvas: np.ndarray, y: int, x: int, offsets) -> None:
    h, w = canvas.shape
    for dy, dx in offsets:
        yy, xx = y + dy, x + dx
        if 0 <= yy < h and 0 <= xx < w:
            canvas[yy, xx] = True


def _trace_tree(rng, canvas, y, x, angle, steps, radius, depth) -> None:
    offsets = _disk_offsets(radius)
    for _ in range(steps):
        y += float(np.sin(angle))
        x += float(np.cos(angle))
        iy, ix = int(round(y)), int(round(x))
        h, w = canvas.shape
        if not (0 <= iy < h and 0 <= ix < w):
            return
        _stamp(canvas, iy, ix, offsets)
        angle += rng.normal(0.0, 0.16)
        if depth > 0 and rng.random() < 0.04:
            fork = angle + float(rng.choice([-1.0, 1.0])) * rng.uniform(0.5, 1.1)
            _trace_tree(rng, canvas, y, x, fork, int(steps * 0.55),
                        max(radius * 0.75, 0.5), depth - 1)


def _vessel_mask(rng, h: int, w: int) -> np.ndarray:
    canvas = np.zeros((h, w), dtype=bool)
    n_trees = max(2, round(h * w / 1800))
    for _ in range(n_trees):
        edge = int(rng.integers(4))
        if edge == 0:
            y, x, angle = 0.0, float(rng.uniform(0, w - 1)), np.pi / 2
        elif edge == 1:
            y, x, angle = float(h - 1), float(rng.uniform(0, w - 1)), -np.pi / 2
        elif edge == 2:
            y, x, angle = float(rng.uniform(0, h - 1)), 0.0, 0.0
        else:
            y, x, angle = float(rng.uniform(0, h - 1)), float(w - 1), np.pi
        angle += rng.normal(0.0, 0.35)
        steps = int(0.9 * max(h, w) * rng.uniform(0.7, 1.2))
        _trace_tree(rng, canvas, y, x, angle, steps, rng.uniform(0.7, 1.4), depth=2)
    return canvas


def synth_vessels(count: int, size: tuple[int, int], seed: int,
                  noise_level: float = 0.04) -> DatasetSpec:
    """Deterministic branching-polyline dataset at network-ready geometry.

    Masks are rasterized trees 1-3 px wide; images are a smooth warm background
    with darkened vessels plus optional Gaussian noise. All ids land in
    train_ids; callers re-split as needed.
    """
    h, w = size
    if h % 8 or w % 8 or h < 16 or w < 16:
        raise ConfigError(f"size {size} must be >= 16 and divisible by 8")
    ds = DatasetSpec(name=f"synth-{count}x{h}x{w}", pad_size=(h, w))
    root_ss = np.random.SeedSequence(seed)
    for i, child in enumerate(root_ss.spawn(count)):
        rng = np.random.default_rng(child)
        mask = _vessel_mask(rng, h, w)
        # rare sparse draw: retrace on the same stream until enough vessel
        attempts = 0
        while mask.mean() < 0.02 and attempts < 8:
            mask |= _vessel_mask(rng, h, w)
            attempts += 1
        smooth = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 6)
        smooth /= max(float(np.abs(smooth).max()), 1e-6)
        background = 0.58 + 0.15 * smooth
        soft = gaussian_filter(mask.astype(np.float32), sigma=0.7)
        soft /= max(float(soft.max()), 1e-6)
        image = np.stack([background * 1.12, background, background * 0.82], axis=-1)
        image -= soft[..., None] * np.array([0.30, 0.38, 0.26], dtype=np.float32)
        if noise_level > 0:
            image = image + rng.normal(0.0, noise_level, image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        sample_id = f"synth-{i:03d}"
        ds.samples.append(Sample(
            id=sample_id,
            image=image,
            mask=mask.astype(np.float32)[..., None],
            original_size=(h, w),
            padded_size=(h, w),
        ))
        ds.train_ids.append(sample_id)
    return ds
