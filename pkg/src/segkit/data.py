"""Segmentation samples: synthetic generation, PNG folder I/O, flip/crop augmentation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255

# class 0 is background; the rest cycle through this table
_PALETTE = np.array(
    [
        [120, 120, 120],
        [220, 40, 40],
        [40, 180, 60],
        [40, 80, 220],
        [230, 200, 40],
        [200, 60, 200],
        [40, 200, 200],
        [250, 140, 30],
        [120, 60, 20],
        [250, 250, 250],
        [20, 20, 20],
        [140, 200, 120],
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class SegmentationSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    mask: np.ndarray  # int64 [H, W]
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape[1:]} and mask {self.mask.shape} sizes differ")

    @property
    def size(self):
        return self.mask.shape


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # or "folder"
    n_cls: int = 5
    ignore_index: int = IGNORE_INDEX
    seed: int = 0
    n_images: int = 8
    size: Sequence[int] = (64, 64)
    images_dir: Optional[str] = None
    masks_dir: Optional[str] = None
    mean: Sequence[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    std: Sequence[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ValueError(f"data.source must be 'synthetic' or 'folder', got {self.source!r}")
        if self.n_cls < 2:
            raise ValueError(f"data.n_cls must be >= 2, got {self.n_cls}")
        if isinstance(self.size, int):
            self.size = (self.size, self.size)
        self.size = tuple(int(s) for s in self.size)
        if self.source == "folder" and not (self.images_dir and self.masks_dir):
            raise ValueError("folder datasets need data.images_dir and data.masks_dir")


def class_color(k: int) -> np.ndarray:
    return _PALETTE[k % len(_PALETTE)]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = class_color(0)
    yy, xx = np.mgrid[0:h, 0:w]
    period = int(rng.integers(6, 12))
    stripes = ((xx + yy) // period) % 2 * 16 - 8
    noise = rng.integers(-10, 11, size=(h, w, 3))
    return base[None, None, :] + stripes[..., None] + noise


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    sh = int(rng.integers(h // 5, h // 2 + 1))
    sw = int(rng.integers(w // 5, w // 2 + 1))
    y0 = int(rng.integers(0, h - sh + 1))
    x0 = int(rng.integers(0, w - sw + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.integers(0, 2):
        return (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
    # ellipse test in integers: ((2y - cy)/sh)^2 + ((2x - cx)/sw)^2 <= 1, scaled by sh^2 sw^2
    cy, cx = 2 * y0 + sh - 1, 2 * x0 + sw - 1
    dy, dx = 2 * yy - cy, 2 * xx - cx
    return dy * dy * sw * sw + dx * dx * sh * sh <= sh * sh * sw * sw


def generate_synthetic(spec: DatasetSpec) -> List[SegmentationSample]:
    """Textured background (class 0) with coloured rectangles and ellipses.

    Foreground classes are handed out round-robin across the whole set so
    that every class shows up once there are enough shapes.  All geometry is
    drawn as integers, so output is identical for a given seed everywhere.
    """
    h, w = spec.size
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise ValueError(f"synthetic size must be a positive multiple of 32, got {h}x{w}")
    if spec.n_cls < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    next_cls = 1
    samples = []
    for i in range(spec.n_images):
        img = _background(rng, h, w)
        mask = np.zeros((h, w), dtype=np.int64)
        for _ in range(int(rng.integers(2, 5))):
            k = next_cls
            next_cls = next_cls % (spec.n_cls - 1) + 1
            # shapes never overlap, so every drawn class stays visible
            for _ in range(20):
                full = _shape_mask(rng, h, w)
                region = full & (mask == 0)
                if 4 * int(region.sum()) >= int(full.sum()):
                    break
            else:
                continue
            jitter = rng.integers(-12, 13, size=(h, w, 3))
            img = np.where(region[..., None], class_color(k)[None, None, :] + jitter, img)
            mask[region] = k
        img = np.clip(img, 0, 255).astype(np.uint8)
        samples.append(_from_uint8(img, mask, f"synth_{i:04d}"))
    _check_coverage(samples, spec)
    return samples


def _check_coverage(samples, spec: DatasetSpec) -> None:
    present = set()
    for s in samples:
        present.update(np.unique(s.mask).tolist())
    missing = sorted(set(range(spec.n_cls)) - present)
    if missing and len(samples) * 2 >= spec.n_cls:
        logger.warning("synthetic set lacks classes %s (no free space for their shapes)", missing)


def _from_uint8(img_hwc: np.ndarray, mask: np.ndarray, name: str) -> SegmentationSample:
    image = np.ascontiguousarray(img_hwc.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0)
    mask = np.ascontiguousarray(mask, dtype=np.int64)
    image.setflags(write=False)
    mask.setflags(write=False)
    return SegmentationSample(image, mask, name)


def to_uint8(sample: SegmentationSample):
    img = np.rint(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    return img, sample.mask


# ---------------------------------------------------------------------------
# folder layout: images_dir/<name>.png + masks_dir/<name>.png
# ---------------------------------------------------------------------------

def write_folder(samples: Sequence[SegmentationSample], root, n_cls: int, ignore_index: int = IGNORE_INDEX) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for s in samples:
        img, mask = to_uint8(s)
        m = np.where(mask == ignore_index, 255, mask)
        if m.max() > 255 or m.min() < 0:
            raise ValueError(f"mask labels of {s.name} do not fit an 8-bit index image")
        Image.fromarray(img).save(root / "images" / f"{s.name}.png")
        Image.fromarray(m.astype(np.uint8)).save(root / "masks" / f"{s.name}.png")
        pairs.append(s.name)
    manifest = {"n_cls": n_cls, "ignore_index": ignore_index, "pairs": pairs}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def load_folder(spec: DatasetSpec) -> List[SegmentationSample]:
    images_dir, masks_dir = Path(spec.images_dir), Path(spec.masks_dir)
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise FileNotFoundError(f"dataset directories missing: {images_dir}, {masks_dir}")
    images = {p.stem: p for p in sorted(images_dir.glob("*.png"))}
    masks = {p.stem: p for p in sorted(masks_dir.glob("*.png"))}
    if not images and not masks:
        logger.warning("no PNG files under %s; dataset is empty", images_dir)
        return []
    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        raise FileNotFoundError(f"images and masks are not paired by name: {unpaired[:5]}")
    samples = []
    for name in sorted(images):
        img = np.asarray(Image.open(images[name]).convert("RGB"))
        with Image.open(masks[name]) as mimg:
            if mimg.mode not in ("L", "P"):
                raise ValueError(f"mask {masks[name]} must be a single-channel index image, got mode {mimg.mode}")
            raw = np.asarray(mimg).astype(np.int64)
        if raw.shape != img.shape[:2]:
            raise ValueError(f"{name}: image {img.shape[:2]} and mask {raw.shape} sizes differ")
        mask = np.where(raw == 255, spec.ignore_index, raw)
        bad = (mask != spec.ignore_index) & (mask >= spec.n_cls)
        if bad.any():
            raise ValueError(f"{name}: mask label {int(mask[bad][0])} >= n_cls={spec.n_cls}")
        samples.append(_from_uint8(img, mask, name))
    return samples


def load_dataset(spec: DatasetSpec) -> List[SegmentationSample]:
    return generate_synthetic(spec) if spec.source == "synthetic" else load_folder(spec)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def random_flip(sample: SegmentationSample, rng: np.random.Generator, p: float = 0.5) -> SegmentationSample:
    """Horizontal flip with probability ``p``."""
    if rng.random() >= p:
        return sample
    img = np.ascontiguousarray(sample.image[:, :, ::-1])
    mask = np.ascontiguousarray(sample.mask[:, ::-1])
    return SegmentationSample(img, mask, sample.name)


def random_crop(
    sample: SegmentationSample,
    crop_h: int,
    crop_w: int,
    rng: np.random.Generator,
    ignore_index: int = IGNORE_INDEX,
) -> SegmentationSample:
    """Uniform random window; short sides are padded (image: channel mean, mask: ignore)."""
    img, mask = sample.image, sample.mask
    h, w = mask.shape
    ph, pw = max(crop_h - h, 0), max(crop_w - w, 0)
    if ph or pw:
        fill = img.reshape(3, -1).mean(axis=1).astype(img.dtype)
        padded = np.empty((3, h + ph, w + pw), dtype=img.dtype)
        padded[:] = fill[:, None, None]
        padded[:, :h, :w] = img
        pmask = np.full((h + ph, w + pw), ignore_index, dtype=mask.dtype)
        pmask[:h, :w] = mask
        img, mask = padded, pmask
        h, w = mask.shape
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    return SegmentationSample(
        np.ascontiguousarray(img[:, y0 : y0 + crop_h, x0 : x0 + crop_w]),
        np.ascontiguousarray(mask[y0 : y0 + crop_h, x0 : x0 + crop_w]),
        sample.name,
    )


def normalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=image.dtype)[:, None, None]
    s = np.asarray(std, dtype=image.dtype)[:, None, None]
    return (image - m) / s
