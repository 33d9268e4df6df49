"""Synthetic cine phantom volumes for desk-scale verification.

Real population imaging data cannot ship with this repository, so tests and
demos run on phantoms. Each volume holds an ellipsoidal "ventricle" whose
cross-sectional disk shrinks monotonically from the basal slice (largest)
down to the apical slice (a near-dot), a crescent column alongside it that
mimics the right ventricle / atrium and is largest adjacent to the basal
disk, Gaussian background noise, and a random in-plane offset per volume.

Both stack ends carry localized appearance cues, so the carved triplet
labels are learnable and the learned evidence sits on the ventricle itself:
the apical cap prints brighter than the disk body, and the basal disk
contains a dimmer valve-opening core. The per-volume size jitter is wide
enough that absolute disk size alone cannot separate the classes.

``phantom_geometry`` exposes the exact shape parameters drawn for a seed,
letting tests recover ground-truth cardiac voxels independently of the
rendered intensities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidSliceCount
from .volumes import FULL_COVERAGE_SLICE_COUNTS, VolumeStack

APEX_RADIUS = 3.0
BASE_RADIUS = 17.0
DISK_INTENSITY = 0.72
APEX_CAP_INTENSITY = 0.98  # the apical cap reads brighter than the body
CORE_INTENSITY = 0.98  # bright blood-pool core marks the basal (valve) disk
CORE_RADIUS_FRACTION = 0.45
CRESCENT_RADIUS_FRACTION = 0.6  # crescent size tracks its slice's disk
CRESCENT_LEVEL_RANGE = (0.25, 0.45)  # below print threshold; varies per volume
BACKGROUND_MEAN = 0.10
BACKGROUND_SIGMA = 0.05


@dataclass(frozen=True)
class PhantomGeometry:
    """Shape parameters of one phantom volume (pixel units, row/col axes)."""

    n_slices: int
    size: int
    center: tuple[float, float]  # disk center, shared by all slices
    radii: tuple[float, ...]  # per slice, apex end first, strictly increasing
    crescent_angle: float  # direction from the disk center to the crescents
    crescent_level: float

    def has_crescent(self, k: int) -> bool:
        """The crescent column spans only the basal half of the stack."""
        return k >= self.n_slices // 2

    def crescent_radius(self, k: int) -> float:
        return CRESCENT_RADIUS_FRACTION * self.radii[k]

    def crescent_center(self, k: int) -> tuple[float, float]:
        dist = self.radii[k] + self.crescent_radius(k) - 2.0  # slight overlap
        return (
            self.center[0] + dist * math.sin(self.crescent_angle),
            self.center[1] + dist * math.cos(self.crescent_angle),
        )


def _geometry_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 17])


def _texture_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 91])


def phantom_geometry(seed: int, n: int, size: int = 128) -> PhantomGeometry:
    """Deterministic geometry draw for ``generate_phantom(seed, n, ...)``."""
    if n not in FULL_COVERAGE_SLICE_COUNTS:
        raise InvalidSliceCount(f"phantom slice count {n} not in {FULL_COVERAGE_SLICE_COUNTS}")
    rng = _geometry_rng(seed)
    # Wide per-volume size jitter keeps absolute disk size from separating
    # the classes on its own; the boundary-slice appearance has to carry it.
    scale = rng.uniform(0.75, 1.25)
    offset = rng.uniform(-10.0, 10.0, size=2)
    center = (size / 2 + offset[0], size / 2 + offset[1])

    # Ellipsoid-like profile: radius grows from the apical dot to the base.
    # The sqrt shape (a sphere cap's cross-section) keeps the apex-end steps
    # large, so shifting the stack by one slice changes it visibly.
    t = np.arange(n) / (n - 1)
    radii = (APEX_RADIUS + (BASE_RADIUS - APEX_RADIUS) * t**0.5) * scale

    # Fit the largest (basal) crescent inside the image; smaller ones follow.
    r_big = CRESCENT_RADIUS_FRACTION * radii[-1]
    angle = rng.uniform(0.0, 2 * math.pi)
    for _ in range(32):
        dist = radii[-1] + r_big - 2.0
        cy = center[0] + dist * math.sin(angle)
        cx = center[1] + dist * math.cos(angle)
        margin = r_big + 2.0
        if margin <= cy <= size - margin and margin <= cx <= size - margin:
            break
        angle = rng.uniform(0.0, 2 * math.pi)
    else:
        # Point back toward the image center when every draw fell off-image.
        angle = math.atan2(size / 2 - center[0], size / 2 - center[1])
    return PhantomGeometry(
        n_slices=n,
        size=size,
        center=center,
        radii=tuple(float(r) for r in radii),
        crescent_angle=float(angle),
        crescent_level=float(rng.uniform(*CRESCENT_LEVEL_RANGE)),
    )


def _disk(size: int, center: tuple[float, float], radius: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2


def _crescent(geom: PhantomGeometry, k: int) -> np.ndarray:
    """Crescent adjacent to slice k's disk: a circle minus an inner bite."""
    radius = geom.crescent_radius(k)
    cy, cx = geom.crescent_center(k)
    bite = (
        cy - 0.55 * radius * math.sin(geom.crescent_angle),
        cx - 0.55 * radius * math.cos(geom.crescent_angle),
    )
    body = _disk(geom.size, (cy, cx), radius)
    return body & ~_disk(geom.size, bite, 0.95 * radius)


def ventricle_mask(seed: int, n: int, size: int = 128) -> np.ndarray:
    """Ground-truth ventricle disk voxels, bool (n, size, size)."""
    geom = phantom_geometry(seed, n, size)
    return np.stack([_disk(size, geom.center, r) for r in geom.radii])


def cardiac_mask(seed: int, n: int, size: int = 128) -> np.ndarray:
    """Ventricle disks plus the crescent column: every synthetic heart voxel."""
    geom = phantom_geometry(seed, n, size)
    mask = ventricle_mask(seed, n, size)
    for k in range(n):
        if geom.has_crescent(k):
            mask[k] |= _crescent(geom, k)
    return mask


def generate_phantom(
    seed: int, n: int, missing: str = "none", size: int = 128
) -> VolumeStack:
    """Render one full-coverage phantom volume, deterministic for ``seed``."""
    if missing != "none":
        raise ValueError(f"only full-coverage phantoms are supported, got missing={missing!r}")
    geom = phantom_geometry(seed, n, size)
    rng = _texture_rng(seed)

    slices = rng.normal(BACKGROUND_MEAN, BACKGROUND_SIGMA, size=(n, size, size))
    for k, radius in enumerate(geom.radii):
        disk = _disk(size, geom.center, radius)
        level = APEX_CAP_INTENSITY if k == 0 else DISK_INTENSITY
        texture = rng.normal(0.0, 0.03, size=int(disk.sum()))
        slices[k][disk] = level + texture
        if geom.has_crescent(k):
            crescent = _crescent(geom, k)
            slices[k][crescent] = geom.crescent_level + rng.normal(
                0.0, 0.03, size=int(crescent.sum())
            )
    core = _disk(size, geom.center, CORE_RADIUS_FRACTION * geom.radii[-1])
    slices[-1][core] = CORE_INTENSITY + rng.normal(0.0, 0.02, size=int(core.sum()))
    slices = np.clip(slices, 0.0, 1.0).astype(np.float32)
    return VolumeStack(volume_id=f"phantom-{seed:06d}-n{n}", slices=slices)


def _paint_blobs(
    slices: np.ndarray,
    rng: np.random.Generator,
    n_blobs: int,
    intensity: float,
    keepout: np.ndarray | None,
) -> np.ndarray:
    """Overlay up to n_blobs bright discs on every slice, avoiding keepout."""
    n, h, w = slices.shape
    out = slices.copy()
    yy, xx = np.mgrid[:h, :w]
    placed = 0
    for _ in range(n_blobs * 20):
        if placed == n_blobs:
            break
        cy = rng.uniform(8, h - 8)
        cx = rng.uniform(8, w - 8)
        radius = rng.uniform(3.0, 8.0)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        if keepout is not None and (blob & keepout).any():
            continue
        level = intensity + rng.uniform(-0.05, 0.05)
        for k in range(n):
            out[k][blob] = level + rng.normal(0.0, 0.02, size=int(blob.sum()))
        placed += 1
    return np.clip(out, 0.0, 1.0)


def add_clutter(
    volume: VolumeStack,
    seed: int,
    n_blobs: int = 10,
    intensity: float = 0.9,
    keepout: np.ndarray | None = None,
) -> VolumeStack:
    """Overlay bright distractor blobs outside the ``keepout`` region.

    The blobs span all slices (like out-of-plane anatomy) and imitate the
    ventricle's brightness, which makes clean-trained classifiers stumble;
    masking the stack down to its salient region removes them again.
    """
    rng = np.random.default_rng([int(seed), 53])
    slices = _paint_blobs(volume.slices, rng, n_blobs, intensity, keepout)
    return VolumeStack(
        volume_id=volume.volume_id + "-clutter",
        slices=slices,
        pixel_spacing=volume.pixel_spacing,
        slice_thickness=volume.slice_thickness,
    )


def clutter_stack(
    stack: np.ndarray,
    seed: int,
    n_blobs: int = 10,
    intensity: float = 0.9,
    keepout: np.ndarray | None = None,
) -> np.ndarray:
    """Blob clutter for a bare (k, h, w) array; same recipe as add_clutter.

    Useful for augmenting extracted triplets or mask-corpus stacks with
    distractors without round-tripping through a VolumeStack.
    """
    arr = np.asarray(stack, dtype=np.float32)
    rng = np.random.default_rng([int(seed), 53])
    return _paint_blobs(arr, rng, n_blobs, intensity, keepout).astype(np.float32)
