"""Triplet carving, fold assignment, and the dataset manifest format.

A full-coverage volume yields exactly four labelled stacks:

    apex  positive (1, 2, 3)        apex  negative (2, 3, 4)
    basal positive (n-2, n-1, n)    basal negative (n-3, n-2, n-1)

Slice index 1 is the apex-most slice, index n the basal-most. The positive
stack of a task contains the boundary slice; the negative stack is shifted
one slice inward and misses it. Folds are assigned per volume, never per
sample, so sibling triplets cannot leak across a train/test split.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import IOFailure, ShapeMismatch, TooFewVolumes, UnreadableFile
from .volumes import VolumeStack

TASKS = ("apex", "basal")
LABELS = ("P", "N")


@dataclass(frozen=True)
class TripletSample:
    """Three consecutive slices with a task tag and a P/N label."""

    stack: np.ndarray  # (3, h, w) float32 in [0, 1]
    label: str
    task: str
    source_volume_id: str
    slice_indices: tuple[int, int, int]  # 1-based within the source volume

    def __post_init__(self) -> None:
        stack = np.asarray(self.stack, dtype=np.float32)
        if stack.ndim != 3 or stack.shape[0] != 3:
            raise ShapeMismatch(f"triplet stack must be (3, h, w), got {stack.shape}")
        if stack.shape[1] != stack.shape[2]:
            raise ShapeMismatch(f"triplet slices must be square, got {stack.shape}")
        if not np.isfinite(stack).all():
            raise ShapeMismatch("triplet stack contains non-finite intensities")
        object.__setattr__(self, "stack", stack)
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        idx = tuple(int(i) for i in self.slice_indices)
        if len(idx) != 3 or idx[1] != idx[0] + 1 or idx[2] != idx[1] + 1:
            raise ValueError(f"slice_indices must be consecutive, got {idx}")
        object.__setattr__(self, "slice_indices", idx)

    @property
    def sample_id(self) -> str:
        return f"{self.source_volume_id}--{self.task}-{self.label}"

    @property
    def y(self) -> int:
        """Binary target: positive stacks are 1."""
        return 1 if self.label == "P" else 0


@dataclass
class TaskDataset:
    """All triplets of one task plus a volume-grouped fold partition."""

    task: str
    samples: list[TripletSample]
    fold_assignment: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for s in self.samples:
            if s.task != self.task:
                raise ValueError(
                    f"sample {s.sample_id} has task {s.task!r}, dataset is {self.task!r}"
                )
        missing = [s.sample_id for s in self.samples if s.sample_id not in self.fold_assignment]
        if self.fold_assignment and missing:
            raise ValueError(f"samples without a fold: {missing[:3]}")

    @property
    def k(self) -> int:
        return max(self.fold_assignment.values()) + 1 if self.fold_assignment else 0

    def fold_of(self, sample: TripletSample) -> int:
        return self.fold_assignment[sample.sample_id]

    def test_samples(self, fold: int) -> list[TripletSample]:
        return [s for s in self.samples if self.fold_of(s) == fold]

    def train_samples(self, fold: int) -> list[TripletSample]:
        return [s for s in self.samples if self.fold_of(s) != fold]

    def class_counts(self) -> tuple[int, int]:
        pos = sum(1 for s in self.samples if s.label == "P")
        return pos, len(self.samples) - pos


def _resize_slice(img: np.ndarray, target: int) -> np.ndarray:
    """Center-crop to square, then bilinear-resample to target x target."""
    h, w = img.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    img = img[top : top + side, left : left + side]
    if side == target:
        return img.astype(np.float32)
    out = ndimage.zoom(img, target / side, order=1, mode="nearest", grid_mode=True)
    if out.shape != (target, target):
        raise ShapeMismatch(f"resize produced {out.shape}, wanted {(target, target)}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _carve(volume: VolumeStack, indices: tuple[int, int, int], task: str, label: str, target: int) -> TripletSample:
    stack = np.stack([_resize_slice(volume.slices[i - 1], target) for i in indices])
    return TripletSample(
        stack=stack,
        label=label,
        task=task,
        source_volume_id=volume.volume_id,
        slice_indices=indices,
    )


def extract_triplets(volume: VolumeStack, target_size: int = 128) -> tuple[TripletSample, TripletSample, TripletSample, TripletSample]:
    """Carve (apex-P, apex-N, basal-P, basal-N) out of one volume."""
    n = volume.n_slices
    return (
        _carve(volume, (1, 2, 3), "apex", "P", target_size),
        _carve(volume, (2, 3, 4), "apex", "N", target_size),
        _carve(volume, (n - 2, n - 1, n), "basal", "P", target_size),
        _carve(volume, (n - 3, n - 2, n - 1), "basal", "N", target_size),
    )


def make_folds(samples: list[TripletSample], k: int, seed: int) -> TaskDataset:
    """Volume-grouped k-fold partition, deterministic for seed.

    Volumes are shuffled and dealt round-robin, so fold sizes (in volumes)
    differ by at most one and sibling P/N triplets always share a fold.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if not samples:
        raise TooFewVolumes("no samples to fold")
    tasks = {s.task for s in samples}
    if len(tasks) != 1:
        raise ValueError(f"make_folds needs a single task, got {sorted(tasks)}")
    volumes = sorted({s.source_volume_id for s in samples})
    if len(volumes) < k:
        raise TooFewVolumes(f"{len(volumes)} volumes cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(volumes))
    volume_fold = {volumes[j]: i % k for i, j in enumerate(order)}
    assignment = {s.sample_id: volume_fold[s.source_volume_id] for s in samples}
    return TaskDataset(task=tasks.pop(), samples=list(samples), fold_assignment=assignment)


# ---------------------------------------------------------------------------
# Manifest I/O: JSON lines, one record per sample, plus raw tensor files.
# ---------------------------------------------------------------------------


def _tensor_relpath(sample_id: str) -> str:
    return f"tensors/{sample_id}.raw"


def _write_tensor(path: Path, stack: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(stack, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "float32"}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def _read_tensor(path: Path) -> np.ndarray:
    try:
        sidecar = json.loads(path.with_suffix(".json").read_text())
        shape = tuple(int(x) for x in sidecar["shape"])
        data = np.frombuffer(path.read_bytes(), dtype="<f4")
    except (OSError, ValueError, KeyError) as exc:
        raise UnreadableFile(f"cannot read tensor {path}: {exc}") from exc
    if data.size != int(np.prod(shape)):
        raise UnreadableFile(f"tensor {path} has {data.size} values, sidecar says {shape}")
    return data.reshape(shape).astype(np.float32)


def save_dataset(datasets: list[TaskDataset], out_dir: Path) -> Path:
    """Write tensors plus manifest.jsonl (records sorted by id); returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for ds in datasets:
        for s in ds.samples:
            rel = _tensor_relpath(s.sample_id)
            _write_tensor(out_dir / rel, s.stack)
            records.append(
                {
                    "id": s.sample_id,
                    "task": s.task,
                    "label": s.label,
                    "source_volume": s.source_volume_id,
                    "indices": list(s.slice_indices),
                    "fold": ds.fold_assignment.get(s.sample_id),
                    "tensor_path": rel,
                }
            )
    records.sort(key=lambda r: r["id"])
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return manifest


def load_dataset(manifest_path: Path, task: str) -> TaskDataset:
    """Rebuild one task's TaskDataset from a manifest written by save_dataset."""
    manifest_path = Path(manifest_path)
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    try:
        lines = manifest_path.read_text().splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {manifest_path}: {exc}") from exc
    samples: list[TripletSample] = []
    assignment: dict[str, int] = {}
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["task"] != task:
            continue
        stack = _read_tensor(manifest_path.parent / rec["tensor_path"])
        sample = TripletSample(
            stack=stack,
            label=rec["label"],
            task=rec["task"],
            source_volume_id=rec["source_volume"],
            slice_indices=tuple(rec["indices"]),
        )
        samples.append(sample)
        if rec.get("fold") is not None:
            assignment[sample.sample_id] = int(rec["fold"])
    return TaskDataset(task=task, samples=samples, fold_assignment=assignment)


def manifest_sha256(manifest_path: Path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()
