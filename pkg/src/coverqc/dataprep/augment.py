"""Label-preserving triplet augmentation.

One transform is drawn per triplet and applied identically to all three
slices, so the stack stays geometrically consistent. Training folds are
doubled: every sample contributes itself plus exactly one augmented copy.

Rotation convention: a positive angle rotates content counter-clockwise as
displayed (row 0 at top). A point at offset (dr, dc) from the image center
moves to (dr*cos a - dc*sin a, dr*sin a + dc*cos a).

The per-sample random draw is keyed on (spec.seed, crc32(sample_id)) and the
draw order is fixed (angle, hflip, vflip, brightness), so augmentation is
reproducible regardless of dataset ordering.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .triplets import TripletSample

MAX_ROTATION_DEG = 45.0


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_range: tuple[float, float] = (-20.0, 20.0)
    allow_hflip: bool = True
    allow_vflip: bool = True
    brightness_range: tuple[float, float] = (0.0, 0.1)  # additive delta
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.rotation_range
        if not (-MAX_ROTATION_DEG <= lo <= hi <= MAX_ROTATION_DEG):
            raise ValueError(f"rotation_range must be within +-{MAX_ROTATION_DEG} deg, got {self.rotation_range}")
        blo, bhi = self.brightness_range
        if not (0.0 <= blo <= bhi <= 1.0):
            raise ValueError(f"brightness_range must be within [0,1], got {self.brightness_range}")


def rotate_slice(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the slice center, constant 0 fill."""
    if degrees == 0.0:
        return img.astype(np.float32)
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    # affine_transform maps output index q to input index A @ (q - center) + center;
    # A is the inverse of the forward content rotation documented above.
    matrix = np.array([[c, s], [-s, c]])
    center = (np.asarray(img.shape) - 1) / 2
    offset = center - matrix @ center
    out = ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return out.astype(np.float32)


def flip_horizontal(stack: np.ndarray) -> np.ndarray:
    """Mirror columns of a (3, h, w) stack."""
    return np.ascontiguousarray(stack[:, :, ::-1])


def flip_vertical(stack: np.ndarray) -> np.ndarray:
    """Mirror rows of a (3, h, w) stack."""
    return np.ascontiguousarray(stack[:, ::-1, :])


def augment(t: TripletSample, spec: AugmentationSpec) -> TripletSample:
    """Return a transformed copy of ``t``; label, task, and indices survive."""
    rng = np.random.default_rng([int(spec.seed), zlib.crc32(t.sample_id.encode())])
    angle = float(rng.uniform(*spec.rotation_range))
    hflip = spec.allow_hflip and rng.random() < 0.5
    vflip = spec.allow_vflip and rng.random() < 0.5
    delta = float(rng.uniform(*spec.brightness_range))

    stack = t.stack
    if angle != 0.0:
        stack = np.stack([rotate_slice(sl, angle) for sl in stack])
    if hflip:
        stack = flip_horizontal(stack)
    if vflip:
        stack = flip_vertical(stack)
    if delta != 0.0:
        stack = stack + delta
    stack = np.clip(stack, 0.0, 1.0).astype(np.float32)
    return TripletSample(
        stack=np.ascontiguousarray(stack),
        label=t.label,
        task=t.task,
        source_volume_id=t.source_volume_id,
        slice_indices=t.slice_indices,
    )


def double_with_augmentation(samples: list[TripletSample], spec: AugmentationSpec) -> list[TripletSample]:
    """Originals followed by one augmented copy each (training-time doubling)."""
    return list(samples) + [augment(s, spec) for s in samples]
