"""Per-task 3D CNN scoring the probability that a stack contains its boundary slice.

Architecture: three blocks of (3D conv -> 3D max-pool -> batch norm -> ReLU)
followed by three fully connected layers ending in one sigmoid unit. Pooling
never crosses the 3-slice axis, so 3D context over the triplet survives to
the head. Trained with plain SGD on binary cross-entropy.

Checkpoints are single zip archives holding the weight blob plus JSON
metadata. The architecture fingerprint hashes the canonical architecture
description together with the sorted parameter bytes, so reruns with equal
seeds produce equal fingerprints regardless of archive timestamps.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .dataprep.augment import AugmentationSpec, double_with_augmentation
from .dataprep.triplets import TaskDataset, TripletSample
from .errors import (
    CheckpointArchMismatch,
    EmptyTrainingSet,
    InvalidSpec,
    NonFiniteLoss,
    ShapeMismatch,
    UnreadableFile,
)

CHECKPOINT_TASKS = ("apex", "basal", "apex-unet", "basal-unet")
PROB_EPS = 1e-7  # keeps sigmoid outputs strictly inside (0,1)


@dataclass(frozen=True)
class BaselineArchitectureSpec:
    input_size: int = 128
    depth: int = 3  # slices per stack
    conv_channels: tuple[int, int, int] = (16, 32, 64)
    kernel: tuple[int, int, int] = (3, 3, 3)
    fc_sizes: tuple[int, int, int] = (256, 64, 1)

    def __post_init__(self) -> None:
        if len(self.conv_channels) != 3:
            raise InvalidSpec(f"exactly 3 conv blocks required, got {len(self.conv_channels)}")
        if len(self.fc_sizes) != 3 or self.fc_sizes[-1] != 1:
            raise InvalidSpec(f"head must be 3 fully connected layers ending in 1 unit, got {self.fc_sizes}")
        if any(c < 1 for c in self.conv_channels) or any(f < 1 for f in self.fc_sizes):
            raise InvalidSpec("channel and layer sizes must be positive")
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise InvalidSpec(f"kernel must be 3 odd extents, got {self.kernel}")
        if self.input_size % 8 != 0 or self.input_size < 8:
            raise InvalidSpec(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.depth < 1:
            raise InvalidSpec(f"depth must be positive, got {self.depth}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "BaselineArchitectureSpec":
        return BaselineArchitectureSpec(
            input_size=int(d["input_size"]),
            depth=int(d["depth"]),
            conv_channels=tuple(d["conv_channels"]),
            kernel=tuple(d["kernel"]),
            fc_sizes=tuple(d["fc_sizes"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 50
    batch_size: int = 8
    momentum: float = 0.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidSpec("learning_rate, batch_size and epochs must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidSpec(f"val_fraction must be in [0,1), got {self.val_fraction}")


class BaselineModel(nn.Module):
    def __init__(self, spec: BaselineArchitectureSpec):
        super().__init__()
        self.spec = spec
        pad = tuple(k // 2 for k in spec.kernel)
        blocks = []
        c_in = 1
        for c_out in spec.conv_channels:
            blocks += [
                nn.Conv3d(c_in, c_out, spec.kernel, padding=pad),
                nn.MaxPool3d((1, 2, 2)),  # spatial halving only, depth preserved
                nn.BatchNorm3d(c_out),
                nn.ReLU(inplace=True),
            ]
            c_in = c_out
        self.features = nn.Sequential(*blocks)
        side = spec.input_size // 8
        flat = spec.conv_channels[-1] * spec.depth * side * side
        self.head = nn.Sequential(
            nn.Linear(flat, spec.fc_sizes[0]),
            nn.ReLU(inplace=True),
            nn.Linear(spec.fc_sizes[0], spec.fc_sizes[1]),
            nn.ReLU(inplace=True),
            nn.Linear(spec.fc_sizes[1], spec.fc_sizes[2]),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (batch, 1, depth, h, w)
        z = self.features(x)
        z = z.flatten(1)
        return self.head(z).clamp(PROB_EPS, 1.0 - PROB_EPS)


def build_model(spec: BaselineArchitectureSpec, seed: int) -> BaselineModel:
    torch.manual_seed(seed)
    return BaselineModel(spec)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    task: str
    arch: dict  # canonical architecture description
    state: dict  # torch state_dict
    arch_fingerprint: str
    train_config: dict
    metrics_at_save: dict
    _model: nn.Module | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.task not in CHECKPOINT_TASKS:
            raise ValueError(f"task must be one of {CHECKPOINT_TASKS}, got {self.task!r}")


def fingerprint(arch: dict, state: dict) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(arch, sort_keys=True, separators=(",", ":")).encode())
    h.update(b"\0")
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype="<f4").tobytes())
    return h.hexdigest()


def make_checkpoint(task: str, model: nn.Module, arch: dict, cfg, metrics: dict) -> ModelCheckpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    cfg_dict = asdict(cfg) if not isinstance(cfg, dict) else dict(cfg)
    arch = json.loads(json.dumps(arch))  # canonical form, identical after reload
    return ModelCheckpoint(
        task=task,
        arch=arch,
        state=state,
        arch_fingerprint=fingerprint(arch, state),
        train_config=cfg_dict,
        metrics_at_save=metrics,
        _model=model,
    )


def save_checkpoint(ckpt: ModelCheckpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(ckpt.state, buf)
    meta = {
        "task": ckpt.task,
        "arch": ckpt.arch,
        "arch_fingerprint": ckpt.arch_fingerprint,
        "train_config": ckpt.train_config,
        "metrics_at_save": ckpt.metrics_at_save,
        "created": datetime.date.today().isoformat(),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        stamp = (1980, 1, 1, 0, 0, 0)
        zf.writestr(zipfile.ZipInfo("meta.json", stamp), json.dumps(meta, sort_keys=True, indent=1))
        zf.writestr(zipfile.ZipInfo("weights.pt", stamp), buf.getvalue())
    return path


def load_checkpoint(path: Path) -> ModelCheckpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            state = torch.load(io.BytesIO(zf.read("weights.pt")), weights_only=True)
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise UnreadableFile(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = ModelCheckpoint(
        task=meta["task"],
        arch=meta["arch"],
        state=state,
        arch_fingerprint=meta["arch_fingerprint"],
        train_config=meta["train_config"],
        metrics_at_save=meta["metrics_at_save"],
    )
    if fingerprint(ckpt.arch, state) != ckpt.arch_fingerprint:
        raise CheckpointArchMismatch(f"fingerprint mismatch in {path}")
    return ckpt


def model_from_checkpoint(ckpt: ModelCheckpoint) -> nn.Module:
    """Rebuild (and cache) the eval-mode module for a baseline checkpoint."""
    if ckpt._model is None:
        spec = BaselineArchitectureSpec.from_dict(ckpt.arch)
        model = BaselineModel(spec)
        try:
            model.load_state_dict(ckpt.state)
        except RuntimeError as exc:
            raise CheckpointArchMismatch(str(exc)) from exc
        ckpt._model = model
    ckpt._model.eval()
    return ckpt._model


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _stack_tensor(samples: Sequence[TripletSample], size: int) -> tuple[torch.Tensor, torch.Tensor]:
    for s in samples:
        if s.stack.shape[1] != size:
            raise ShapeMismatch(f"sample {s.sample_id} is {s.stack.shape}, model wants side {size}")
    x = torch.from_numpy(np.stack([s.stack for s in samples])[:, None])  # (N,1,3,h,w)
    y = torch.tensor([[float(s.y)] for s in samples])
    return x, y


def train(
    model: BaselineModel,
    dataset: TaskDataset,
    folds: Iterable[int],
    cfg: TrainConfig,
    augmentation: AugmentationSpec | None = None,
    log_path: Path | None = None,
) -> ModelCheckpoint:
    """Train on the given folds; returns the final-epoch checkpoint.

    A validation split is carved from the training samples before the
    optional augmentation doubling, so augmented copies never leak into
    validation. The best validation epoch is recorded in the metrics but the
    final epoch remains the canonical weights.
    """
    folds = sorted(set(folds))
    samples = [s for s in dataset.samples if dataset.fold_of(s) in folds]
    return train_on_samples(model, dataset.task, samples, cfg, augmentation, log_path)


def train_on_samples(
    model: BaselineModel,
    task: str,
    samples: Sequence[TripletSample],
    cfg: TrainConfig,
    augmentation: AugmentationSpec | None = None,
    log_path: Path | None = None,
) -> ModelCheckpoint:
    if not samples:
        raise EmptyTrainingSet("no training samples in the selected folds")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(cfg.val_fraction * len(samples)))
    val = [samples[i] for i in order[:n_val]]
    tr = [samples[i] for i in order[n_val:]]
    if not tr:
        raise EmptyTrainingSet("validation split consumed every sample")
    if augmentation is not None:
        tr = double_with_augmentation(tr, augmentation)

    size = model.spec.input_size
    x_tr, y_tr = _stack_tensor(tr, size)
    x_val, y_val = _stack_tensor(val, size) if val else (None, None)

    torch.manual_seed(cfg.seed)
    loss_fn = nn.BCELoss()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    shuffler = torch.Generator().manual_seed(cfg.seed)

    rows = []
    best = (float("inf"), 0)
    loss_trace = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(len(tr), generator=shuffler)
        epoch_loss = 0.0
        for start in range(0, len(tr), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            out = model(x_tr[idx])
            loss = loss_fn(out, y_tr[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        epoch_loss /= len(tr)
        loss_trace.append(epoch_loss)

        val_loss, val_acc = float("nan"), float("nan")
        if x_val is not None:
            model.eval()
            with torch.no_grad():
                p = model(x_val)
                val_loss = float(loss_fn(p, y_val))
                val_acc = float(((p >= 0.5) == (y_val >= 0.5)).float().mean())
            if val_loss < best[0]:
                best = (val_loss, epoch)
        rows.append((epoch, epoch_loss, val_loss, val_acc))

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            w.writerows(rows)

    metrics = {
        "final_train_loss": loss_trace[-1],
        "first_train_loss": loss_trace[0],
        "best_val_loss": best[0] if val else None,
        "best_val_epoch": best[1] if val else None,
        "train_samples": len(tr),
        "val_samples": len(val),
        "parameters": parameter_count(model),
    }
    return make_checkpoint(task, model, model.spec.to_dict(), cfg, metrics)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _as_stack_array(stack, size: int) -> np.ndarray:
    if isinstance(stack, TripletSample):
        arr = stack.stack
    else:
        arr = np.asarray(stack, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeMismatch(f"stack must be 3D, got shape {arr.shape}")
    if arr.shape == (size, size, 3) and arr.shape[0] != 3:
        arr = np.transpose(arr, (2, 0, 1))  # accept channels-last input
    if arr.shape != (3, size, size):
        raise ShapeMismatch(f"stack shape {arr.shape} does not match model input (3,{size},{size})")
    return arr


def predict_batch(ckpt: ModelCheckpoint, stacks: Sequence) -> np.ndarray:
    model = model_from_checkpoint(ckpt)
    size = int(ckpt.arch["input_size"])
    arrs = np.stack([_as_stack_array(s, size) for s in stacks])[:, None]
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.from_numpy(arrs).to(dtype))
    return out.squeeze(1).cpu().numpy().astype(np.float64)


def predict(ckpt: ModelCheckpoint, stack) -> float:
    return float(predict_batch(ckpt, [stack])[0])


def classify(probability: float, threshold: float = 0.5) -> str:
    return "P" if probability >= threshold else "N"
