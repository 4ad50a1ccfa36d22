"""Synthetic segmentation data and the training-time augmentations.

Each generated scene is a textured background (class 0) with 2-5 overlapping
shapes (axis-aligned rectangles, disks, rings) drawn from the remaining
classes.  Shape sizes are log-uniform over two octaves so the coarse pyramid
levels see large objects and the fine levels see small ones.  Labels are
pixel-exact; 255 marks pixels to ignore (only produced by padding during
augmentation).

Augmentations follow the usual segmentation set: horizontal flip (p=0.5),
per-channel color jitter (scale U(0.9,1.1), offset U(-0.05,0.05), clamped to
[0,1]), random resize with ratio U(0.5,2) (bilinear for the image, nearest
for labels), and a random crop to the training size, zero-padding the image
and 255-padding the labels when the resized sample is too small.  Every
sample consumes a fixed number of draws from its generator, so augmentation
streams can be derived statelessly from (seed, iteration, slot).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .ops import resize_array, resize_labels

IGNORE_LABEL = 255


@dataclass
class SegmentationSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    labels: np.ndarray  # uint8 [H, W], class indices or 255

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} vs labels {self.labels.shape} spatial mismatch")


def class_palette(n_classes: int) -> np.ndarray:
    """Fixed base color per class; background (class 0) is a mid gray."""
    colors = [(0.5, 0.5, 0.5)]
    for c in range(1, n_classes):
        hue = (c - 1) / max(n_classes - 1, 1)
        colors.append(colorsys.hsv_to_rgb(hue, 0.65, 0.85))
    return np.asarray(colors, dtype=np.float32)


def _shape_mask(kind: int, size: int, cy: float, cx: float, r: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # rectangle
        hy = r
        hx = r * rng.uniform(0.6, 1.4)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    if kind == 1:  # disk
        return dist2 <= r * r
    inner = r * rng.uniform(0.45, 0.7)  # ring
    return (dist2 <= r * r) & (dist2 > inner * inner)


def _generate_one(rng: np.random.Generator, size: int, n_classes: int, palette: np.ndarray) -> SegmentationSample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    image = np.empty((3, size, size), dtype=np.float64)
    for ch in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        image[ch] = palette[0, ch] + 0.06 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    labels = np.zeros((size, size), dtype=np.uint8)

    r_lo, r_hi = size / 16.0, size / 4.0  # two octaves of linear scale
    for _ in range(int(rng.integers(2, 6))):
        cls = int(rng.integers(1, n_classes))
        kind = int(rng.integers(0, 3))
        r = float(np.exp(rng.uniform(np.log(r_lo), np.log(r_hi))))
        cy = rng.uniform(r, size - r)
        cx = rng.uniform(r, size - r)
        mask = _shape_mask(kind, size, cy, cx, r, rng)
        color = palette[cls] + rng.uniform(-0.08, 0.08, size=3)
        image[:, mask] = color[:, None]
        labels[mask] = cls

    image += rng.normal(0.0, 0.02, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return SegmentationSample(image=image.astype(np.float32), labels=labels)


def synth_generate(seed: int, count: int, size: int = 64, n_classes: int = 6) -> list[SegmentationSample]:
    """Deterministic scene list; sample i depends only on (seed, i)."""
    if n_classes < 3:
        raise ValueError(f"need at least 3 classes for mixed scenes, got {n_classes}")
    if size % 32:
        raise ValueError(f"size {size} must be divisible by 32")
    palette = class_palette(n_classes)
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out.append(_generate_one(rng, size, n_classes, palette))
    return out


def hflip(sample: SegmentationSample) -> SegmentationSample:
    return SegmentationSample(
        image=np.ascontiguousarray(sample.image[:, :, ::-1]),
        labels=np.ascontiguousarray(sample.labels[:, ::-1]),
    )


def augment(sample: SegmentationSample, rng: np.random.Generator, crop_size: int) -> SegmentationSample:
    image, labels = sample.image, sample.labels
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    a = rng.uniform(0.9, 1.1, size=3).astype(np.float32)
    b = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
    image = np.clip(image * a[:, None, None] + b[:, None, None], 0.0, 1.0)

    ratio = rng.uniform(0.5, 2.0)
    h, w = labels.shape
    nh = max(1, round(h * ratio))
    nw = max(1, round(w * ratio))
    image = np.clip(resize_array(image, nh, nw, "bilinear"), 0.0, 1.0).astype(np.float32)
    labels = resize_labels(labels, nh, nw)

    pad_h = max(0, crop_size - nh)
    pad_w = max(0, crop_size - nw)
    if pad_h or pad_w:
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
        labels = np.pad(labels, ((0, pad_h), (0, pad_w)), constant_values=IGNORE_LABEL)
    y0 = int(rng.integers(0, labels.shape[0] - crop_size + 1))
    x0 = int(rng.integers(0, labels.shape[1] - crop_size + 1))
    image = np.ascontiguousarray(image[:, y0 : y0 + crop_size, x0 : x0 + crop_size])
    labels = np.ascontiguousarray(labels[y0 : y0 + crop_size, x0 : x0 + crop_size])
    return SegmentationSample(image=image, labels=labels)


VAL_SEED_OFFSET = 2**32  # keeps validation streams disjoint from any train seed


def synth_splits(seed: int, count: int, val_count: int, size: int, n_classes: int):
    train = synth_generate(seed, count, size, n_classes)
    val = synth_generate(seed + VAL_SEED_OFFSET, val_count, size, n_classes)
    return train, val
