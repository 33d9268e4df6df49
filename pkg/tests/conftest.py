"""Shared fixtures: tiny synthetic datasets and cached trained checkpoints.

Training-dependent unit tests run at 32 px with very small architectures so
the whole suite stays interactive; the full-size end-to-end gates live in
test_acceptance.py. Session-scoped fixtures train once and are reused.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

from coverqc.baseline import (
    BaselineArchitectureSpec,
    TrainConfig,
    build_model,
    train_on_samples,
)
from coverqc.dataprep.triplets import TripletSample, make_folds
from coverqc.explainer import CorpusPair
from coverqc.segmenter import UNetSpec, UNetTrainConfig, train_unet

# one BLAS/torch thread keeps every seeded run bit-reproducible
torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

TINY_SIZE = 32
TINY_ARCH = BaselineArchitectureSpec(
    input_size=TINY_SIZE, conv_channels=(2, 3, 4), fc_sizes=(16, 8, 1)
)
TINY_TRAIN = TrainConfig(
    learning_rate=0.005, epochs=25, batch_size=8, momentum=0.9, val_fraction=0.1, seed=0
)
TINY_UNET_SPEC = UNetSpec(input_size=TINY_SIZE, depth=3, encoder=(4, 8, 16))

_INDICES = {
    ("apex", "P"): (1, 2, 3),
    ("apex", "N"): (2, 3, 4),
    ("basal", "P"): (6, 7, 8),
    ("basal", "N"): (5, 6, 7),
}


def make_disk_sample(
    i: int, task: str, label: str, size: int = TINY_SIZE
) -> tuple[TripletSample, np.ndarray]:
    """Noise triplet; positives carry a bright disk. Returns (sample, disk mask)."""
    rng = np.random.default_rng([i, _INDICES[(task, label)][0], size])
    stack = rng.normal(0.12, 0.04, (3, size, size))
    mask = np.zeros((3, size, size), dtype=bool)
    if label == "P":
        cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
        yy, xx = np.mgrid[:size, :size]
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= 6.0**2
        for k in range(3):
            stack[k][disk] = 0.9 + rng.normal(0.0, 0.02, int(disk.sum()))
        mask[:] = disk
    sample = TripletSample(
        stack=np.clip(stack, 0.0, 1.0).astype(np.float32),
        label=label,
        task=task,
        source_volume_id=f"synth-{i:03d}",
        slice_indices=_INDICES[(task, label)],
    )
    return sample, mask


def make_disk_samples(task: str, n_volumes: int, size: int = TINY_SIZE):
    """P/N pairs for n_volumes synthetic volumes plus the positives' masks."""
    samples, masks = [], {}
    for i in range(n_volumes):
        for label in ("P", "N"):
            s, m = make_disk_sample(i, task, label, size)
            samples.append(s)
            if label == "P":
                masks[s.sample_id] = m
    return samples, masks


@pytest.fixture(scope="session")
def apex_bundle():
    """Trained tiny classifier over 20 separable synthetic volumes.

    Returns (dataset, checkpoint, masks): a 2-fold apex TaskDataset, the
    classifier checkpoint trained on all its samples, and the ground-truth
    disk masks of the positives.
    """
    samples, masks = make_disk_samples("apex", 20)
    dataset = make_folds(samples, 2, seed=0)
    model = build_model(TINY_ARCH, TINY_TRAIN.seed)
    ckpt = train_on_samples(model, "apex", samples, TINY_TRAIN)
    return dataset, ckpt, masks


@pytest.fixture(scope="session")
def tiny_corpus(apex_bundle):
    """Ground-truth (stack, disk mask) pairs for the positives of apex_bundle."""
    dataset, _, masks = apex_bundle
    return [
        CorpusPair(
            sample_id=s.sample_id,
            stack=s.stack,
            mask=masks[s.sample_id],
            top_superpixel_id=0,
            coefficients=np.zeros(4),
            surrogate_r2=1.0,
        )
        for s in dataset.samples
        if s.label == "P"
    ]


@pytest.fixture(scope="session")
def tiny_unet_ckpt(tiny_corpus):
    cfg = UNetTrainConfig(epochs=25, batch_size=4, val_fraction=0.2, seed=0)
    return train_unet(tiny_corpus, cfg, spec=TINY_UNET_SPEC, task="apex-unet")
