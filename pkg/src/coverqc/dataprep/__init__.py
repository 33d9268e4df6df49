"""Volume ingestion, phantom synthesis, triplet carving, folds, augmentation."""

from .augment import (
    AugmentationSpec,
    augment,
    double_with_augmentation,
    flip_horizontal,
    flip_vertical,
    rotate_slice,
)
from .phantom import (
    PhantomGeometry,
    add_clutter,
    clutter_stack,
    cardiac_mask,
    generate_phantom,
    phantom_geometry,
    ventricle_mask,
)
from .triplets import (
    TASKS,
    TaskDataset,
    TripletSample,
    extract_triplets,
    load_dataset,
    make_folds,
    manifest_sha256,
    save_dataset,
)
from .volumes import (
    FULL_COVERAGE_SLICE_COUNTS,
    VolumeStack,
    load_volume,
    minmax_normalize,
    save_nifti,
    save_raw_volume,
)

__all__ = [
    "AugmentationSpec",
    "FULL_COVERAGE_SLICE_COUNTS",
    "PhantomGeometry",
    "TASKS",
    "TaskDataset",
    "TripletSample",
    "VolumeStack",
    "add_clutter",
    "clutter_stack",
    "augment",
    "cardiac_mask",
    "double_with_augmentation",
    "extract_triplets",
    "flip_horizontal",
    "flip_vertical",
    "generate_phantom",
    "load_dataset",
    "load_volume",
    "make_folds",
    "manifest_sha256",
    "minmax_normalize",
    "phantom_geometry",
    "rotate_slice",
    "save_dataset",
    "save_nifti",
    "save_raw_volume",
    "ventricle_mask",
]
