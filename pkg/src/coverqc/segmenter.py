"""Attention-gated 3D U-Net mapping a 3-slice stack to its salient-region mask.

The network is a symmetric encoder/decoder with skip connections; every skip
passes through an additive attention gate driven by the coarser decoder
feature, so the decoder can suppress irrelevant context before fusion.
Pooling and upsampling act on the two spatial axes only: a depth of 3 slices
cannot survive repeated halving, so 3D context lives entirely in the 3x3x3
convolutions.

Supervision comes from the explainer's true-positive mask corpus. Training
minimises BCE plus soft Dice; validation reports the hard Dice coefficient.
Checkpoints share the zip format (and fingerprint rules) of the baseline
classifier.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import baseline
from .baseline import PROB_EPS, ModelCheckpoint, make_checkpoint, parameter_count
from .errors import EmptyCorpus, InvalidSpec, NonFiniteLoss, ShapeMismatch

DICE_SMOOTH = 1.0  # soft-dice stabiliser for empty masks


@dataclass(frozen=True)
class UNetSpec:
    input_size: int = 128
    depth: int = 3  # slices per stack
    encoder: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self) -> None:
        if len(self.encoder) < 2:
            raise InvalidSpec(f"need at least 2 encoder levels, got {len(self.encoder)}")
        if any(c < 1 for c in self.encoder):
            raise InvalidSpec(f"encoder channels must be positive, got {self.encoder}")
        stride = 2 ** (len(self.encoder) - 1)
        if self.input_size < stride or self.input_size % stride != 0:
            raise InvalidSpec(
                f"input_size must be a positive multiple of {stride} "
                f"for {len(self.encoder)} levels, got {self.input_size}"
            )
        if self.depth < 1:
            raise InvalidSpec(f"depth must be positive, got {self.depth}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = "unet"
        return d

    @staticmethod
    def from_dict(d: dict) -> "UNetSpec":
        if d.get("family") != "unet":
            raise InvalidSpec(f"not a U-Net architecture description: {d}")
        return UNetSpec(
            input_size=int(d["input_size"]),
            depth=int(d["depth"]),
            encoder=tuple(d["encoder"]),
        )


@dataclass(frozen=True)
class SegmentationMetrics:
    dice: float
    jaccard: float


@dataclass(frozen=True)
class UNetTrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 4
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidSpec("learning_rate, batch_size and epochs must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidSpec(f"val_fraction must be in [0,1), got {self.val_fraction}")


class _DoubleConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(c_in, c_out, 3, padding=1),
            nn.BatchNorm3d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv3d(c_out, c_out, 3, padding=1),
            nn.BatchNorm3d(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class AttentionGate3d(nn.Module):
    """Additive attention: skip features are rescaled by a learned gate.

    alpha = sigmoid(psi(relu(W_g g + W_x x))); returns x * alpha, where g is
    the decoder feature at the same resolution and x the encoder skip.
    """

    def __init__(self, channels: int):
        super().__init__()
        inter = max(channels // 2, 1)
        self.w_g = nn.Conv3d(channels, inter, 1)
        self.w_x = nn.Conv3d(channels, inter, 1)
        self.psi = nn.Conv3d(inter, 1, 1)

    def forward(self, g: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        alpha = torch.sigmoid(self.psi(torch.relu(self.w_g(g) + self.w_x(x))))
        return x * alpha


class UNetModel(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        chans = spec.encoder
        self.enc = nn.ModuleList()
        c_in = 1
        for c in chans:
            self.enc.append(_DoubleConv(c_in, c))
            c_in = c
        self.pool = nn.MaxPool3d((1, 2, 2))  # spatial halving only

        self.up = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c_skip in reversed(chans[:-1]):
            self.up.append(nn.ConvTranspose3d(c_in, c_skip, (1, 2, 2), stride=(1, 2, 2)))
            self.gates.append(AttentionGate3d(c_skip))
            self.dec.append(_DoubleConv(2 * c_skip, c_skip))
            c_in = c_skip
        self.head = nn.Conv3d(chans[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (batch, 1, depth, h, w) -> per-voxel probability, same shape
        skips = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for up, gate, dec in zip(self.up, self.gates, self.dec):
            x = up(x)
            skip = gate(x, skips.pop())
            x = dec(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x)).clamp(PROB_EPS, 1.0 - PROB_EPS)


def build_unet(spec: UNetSpec, seed: int) -> UNetModel:
    torch.manual_seed(seed)
    return UNetModel(spec)


def unet_from_checkpoint(ckpt: ModelCheckpoint) -> UNetModel:
    """Rebuild (and cache) the eval-mode U-Net for a segmenter checkpoint."""
    if ckpt._model is None:
        spec = UNetSpec.from_dict(ckpt.arch)
        model = UNetModel(spec)
        model.load_state_dict(ckpt.state)
        ckpt._model = model
    ckpt._model.eval()
    return ckpt._model


# ---------------------------------------------------------------------------
# Overlap metrics
# ---------------------------------------------------------------------------


def _binary(a) -> np.ndarray:
    return np.asarray(a) != 0


def _overlap_counts(a, b) -> tuple[int, int, int]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    a, b = _binary(a), _binary(b)
    tp = int((a & b).sum())
    fp = int((a & ~b).sum())
    fn = int((~a & b).sum())
    return tp, fp, fn


def dice(a, b) -> float:
    """2*TP / (FN + 2*TP + FP) against b as reference; both empty -> 1."""
    tp, fp, fn = _overlap_counts(a, b)
    denom = fn + 2 * tp + fp
    return 1.0 if denom == 0 else 2.0 * tp / denom


def jaccard(a, b) -> float:
    """TP / (TP + FN + FP); both empty -> 1."""
    tp, fp, fn = _overlap_counts(a, b)
    denom = tp + fn + fp
    return 1.0 if denom == 0 else tp / denom


def evaluate_masks(a, b) -> SegmentationMetrics:
    return SegmentationMetrics(dice=dice(a, b), jaccard=jaccard(a, b))


def apply_salient_region(stack, mask) -> np.ndarray:
    """Voxelwise product: voxels outside the mask drop to 0, inside survive."""
    arr = np.asarray(stack, dtype=np.float32)
    m = np.asarray(mask)
    if arr.shape != m.shape:
        raise ShapeMismatch(f"stack {arr.shape} and mask {m.shape} shapes differ")
    return (arr * _binary(m)).astype(np.float32)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _corpus_tensors(pairs, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for p in pairs:
        arr = baseline._as_stack_array(p.stack, size)
        m = _binary(p.mask)
        if m.shape != arr.shape:
            raise ShapeMismatch(f"mask {m.shape} does not match stack {arr.shape}")
        xs.append(arr)
        ys.append(m.astype(np.float32))
    x = torch.from_numpy(np.stack(xs)[:, None])
    y = torch.from_numpy(np.stack(ys)[:, None])
    return x, y


def _soft_dice_loss(p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    # per-sample soft dice, averaged over the batch
    dims = tuple(range(1, p.ndim))
    inter = (p * t).sum(dims)
    total = p.sum(dims) + t.sum(dims)
    return (1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)).mean()


def _hard_dice(p: torch.Tensor, t: torch.Tensor) -> float:
    # per-stack mean of the thresholded Dice coefficient
    pm = (p >= 0.5).cpu().numpy()
    tm = (t >= 0.5).cpu().numpy()
    return float(np.mean([dice(pm[i], tm[i]) for i in range(len(pm))]))


def train_unet(
    corpus: Sequence,
    cfg: UNetTrainConfig,
    spec: UNetSpec | None = None,
    task: str | None = None,
    log_path: Path | None = None,
) -> ModelCheckpoint:
    """Fit the U-Net on (stack, mask) pairs; returns the final-epoch checkpoint.

    `corpus` is any sequence of objects with .stack and .mask attributes
    (the explainer's CorpusPair qualifies). An 80/20-style split controlled
    by cfg.val_fraction carves out validation pairs before training; the
    checkpoint metrics record the hard validation Dice (per-stack mean and
    global-voxel variants).
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("cannot train the segmenter on an empty mask corpus")
    if spec is None:
        spec = UNetSpec()
    if task is None:
        task = _infer_task(corpus)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(corpus))
    n_val = int(round(cfg.val_fraction * len(corpus)))
    val = [corpus[i] for i in order[:n_val]]
    tr = [corpus[i] for i in order[n_val:]]
    if not tr:
        raise EmptyCorpus("validation split consumed every corpus pair")

    x_tr, y_tr = _corpus_tensors(tr, spec.input_size)
    x_val, y_val = _corpus_tensors(val, spec.input_size) if val else (None, None)

    model = build_unet(spec, cfg.seed)
    bce = nn.BCELoss()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    shuffler = torch.Generator().manual_seed(cfg.seed)

    rows = []
    loss_trace = []
    val_dice = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(len(tr), generator=shuffler)
        epoch_loss = 0.0
        for start in range(0, len(tr), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            p = model(x_tr[idx])
            loss = bce(p, y_tr[idx]) + _soft_dice_loss(p, y_tr[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        epoch_loss /= len(tr)
        loss_trace.append(epoch_loss)

        if x_val is not None:
            model.eval()
            with torch.no_grad():
                pv = model(x_val)
                val_dice = _hard_dice(pv, y_val)
        rows.append((epoch, epoch_loss, val_dice))

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_dice"])
            w.writerows(rows)

    model.eval()
    with torch.no_grad():
        train_dice = _hard_dice(model(x_tr), y_tr)
        val_dice_global = float("nan")
        if x_val is not None:
            pv = model(x_val)
            val_dice = _hard_dice(pv, y_val)
            val_dice_global = dice((pv >= 0.5).numpy(), (y_val >= 0.5).numpy())

    metrics = {
        "final_train_loss": loss_trace[-1],
        "first_train_loss": loss_trace[0],
        "train_dice": train_dice,
        "val_dice": val_dice if val else None,
        "val_dice_global": val_dice_global if val else None,
        "train_pairs": len(tr),
        "val_pairs": len(val),
        "parameters": parameter_count(model),
    }
    return make_checkpoint(task, model, spec.to_dict(), cfg, metrics)


def _infer_task(corpus) -> str:
    """Derive the checkpoint task from corpus sample ids ("...--apex-P")."""
    for p in corpus:
        sid = getattr(p, "sample_id", "")
        for t in ("apex", "basal"):
            if f"--{t}-" in sid:
                return f"{t}-unet"
    raise InvalidSpec("cannot infer task from corpus sample ids; pass task= explicitly")


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict_mask_batch(ckpt: ModelCheckpoint, stacks: Sequence) -> np.ndarray:
    model = unet_from_checkpoint(ckpt)
    size = int(ckpt.arch["input_size"])
    arrs = np.stack([baseline._as_stack_array(s, size) for s in stacks])[:, None]
    with torch.no_grad():
        p = model(torch.from_numpy(arrs))
    return (p.squeeze(1).cpu().numpy() >= 0.5).astype(np.uint8)


def predict_mask(ckpt: ModelCheckpoint, stack) -> np.ndarray:
    """Per-voxel probability thresholded at 0.5; binary (3, h, w) array."""
    return predict_mask_batch(ckpt, [stack])[0]
