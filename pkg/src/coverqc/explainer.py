"""Superpixel surrogate explanations for positive stack predictions.

For a stack the classifier calls positive, the mean projection of its three
slices is segmented into ~25 SLIC superpixels. Random boolean perturbations
switch superpixels off (fill value 0), the classifier scores every perturbed
stack, and each perturbation is weighted by its cosine proximity to the
unperturbed stack:

    cos = <ones, v> / (||ones|| * ||v||),  d = 1 - cos,
    weight = sqrt(exp(-d^2 / kernel_width^2))

A weighted ridge regression (unpenalized intercept) then maps perturbation
vectors to predicted probabilities; the superpixel with the largest
coefficient, replicated over the three slices, is the stack's salient mask.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.segmentation import slic

from . import baseline
from .dataprep.triplets import TaskDataset, TripletSample
from .errors import (
    DegenerateImageWarning,
    DimensionMismatch,
    EmptyCorpus,
    InvalidSpec,
    LengthMismatch,
    RankDeficientWarning,
    SegmentCountWarning,
    UnreadableFile,
    ZeroVectorWarning,
)


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray  # 2D int map, ids 0..num_segments-1
    num_segments: int
    params: dict

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DimensionMismatch(f"label map must be 2D, got {labels.shape}")
        ids = np.unique(labels)
        if ids[0] != 0 or ids[-1] != self.num_segments - 1 or len(ids) != self.num_segments:
            raise InvalidSpec("superpixel ids must be exactly 0..num_segments-1")
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class PerturbationBatch:
    matrix: np.ndarray  # (B, K) bool; row 0 = all ones
    seed: int
    on_probability: float = 0.5

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=bool)
        if m.ndim != 2:
            raise DimensionMismatch(f"perturbation matrix must be 2D, got {m.shape}")
        if not m[0].all():
            raise InvalidSpec("row 0 must be the all-ones reference perturbation")
        object.__setattr__(self, "matrix", m)

    @property
    def num_perturbations(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_superpixels(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class ExplainerConfig:
    num_perturbations: int = 150
    kernel_width: float = 0.25
    fill_value: float = 0.0
    ridge_penalty: float = 1e-6
    seed: int = 0
    n_segments: int = 25
    compactness: float = 0.3
    max_iter: int = 1000

    def __post_init__(self) -> None:
        if self.kernel_width <= 0:
            raise InvalidSpec(f"kernel_width must be positive, got {self.kernel_width}")
        if self.num_perturbations < 2:
            raise InvalidSpec("need at least 2 perturbations (reference + 1)")
        if self.ridge_penalty < 0:
            raise InvalidSpec("ridge_penalty must be nonnegative")


@dataclass(frozen=True)
class ExplanationResult:
    coefficients: np.ndarray  # K surrogate coefficients, intercept excluded
    top_superpixel_id: int
    mask: np.ndarray  # (3, h, w) bool
    surrogate_r2: float


def _as_stack(stack) -> np.ndarray:
    if isinstance(stack, TripletSample):
        stack = stack.stack
    arr = np.asarray(stack, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionMismatch(f"stack must be (3, h, w), got {arr.shape}")
    return arr


def segment(
    stack,
    n_segments: int = 25,
    compactness: float = 0.3,
    max_iter: int = 1000,
) -> SuperpixelMap:
    """SLIC superpixels on the mean projection across the 3 slices."""
    arr = _as_stack(stack)
    proj = arr.mean(axis=0)
    params = {"n_segments": n_segments, "compactness": compactness, "max_iter": max_iter}
    if np.ptp(proj) == 0.0:
        warnings.warn(
            "constant-intensity stack has nothing to cluster; single segment",
            DegenerateImageWarning,
        )
        return SuperpixelMap(np.zeros(proj.shape, dtype=np.int64), 1, params)
    labels = slic(
        proj.astype(np.float64),
        n_segments=n_segments,
        compactness=compactness,
        max_num_iter=max_iter,
        channel_axis=None,
        start_label=0,
        enforce_connectivity=True,
    )
    _, labels = np.unique(labels, return_inverse=True)
    labels = labels.reshape(proj.shape)
    k = int(labels.max()) + 1
    if not 0.6 * n_segments <= k <= 1.4 * n_segments:
        warnings.warn(
            f"SLIC produced {k} segments for requested {n_segments}",
            SegmentCountWarning,
        )
    return SuperpixelMap(labels, k, params)


def make_perturbations(
    num: int, num_superpixels: int, seed: int, on_probability: float = 0.5
) -> PerturbationBatch:
    """Row 0 is all-ones; remaining rows are i.i.d. Bernoulli(on_probability)."""
    rng = np.random.default_rng(seed)
    matrix = rng.random((num, num_superpixels)) < on_probability
    matrix[0] = True
    return PerturbationBatch(matrix=matrix, seed=seed, on_probability=on_probability)


def perturb(stack, spmap: SuperpixelMap, batch: PerturbationBatch, fill: float = 0.0) -> np.ndarray:
    """Apply every perturbation row: off superpixels -> fill, across all 3 slices."""
    arr = _as_stack(stack)
    if arr.shape[1:] != spmap.labels.shape:
        raise DimensionMismatch(
            f"stack spatial shape {arr.shape[1:]} != label map {spmap.labels.shape}"
        )
    if batch.num_superpixels != spmap.num_segments:
        raise DimensionMismatch(
            f"batch has {batch.num_superpixels} superpixels, map has {spmap.num_segments}"
        )
    on = batch.matrix[:, spmap.labels]  # (B, h, w)
    return np.where(on[:, None], arr[None], np.float32(fill))


def perturbation_weight(perturbation: np.ndarray, kernel_width: float) -> float:
    """Proximity weight of one boolean perturbation to the all-ones reference."""
    v = np.asarray(perturbation, dtype=float)
    if not v.any():
        warnings.warn("all-off perturbation has undefined cosine; weight 0", ZeroVectorWarning)
        return 0.0
    ones = np.ones_like(v)
    cos = float(ones @ v / (np.linalg.norm(ones) * np.linalg.norm(v)))
    d = 1.0 - cos
    return float(np.sqrt(np.exp(-(d**2) / kernel_width**2)))


def perturbation_weights(batch: PerturbationBatch, kernel_width: float) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroVectorWarning)
        w = np.array([perturbation_weight(row, kernel_width) for row in batch.matrix])
    if (~batch.matrix.any(axis=1)).any():
        warnings.warn("batch contains all-off rows; their weight is 0", ZeroVectorWarning)
    return w


def fit_surrogate(
    batch: PerturbationBatch,
    predictions: np.ndarray,
    weights: np.ndarray,
    ridge_penalty: float = 1e-6,
) -> tuple[np.ndarray, float, float]:
    """Weighted ridge fit; returns (coefficients, intercept, weighted R^2).

    Minimizes sum_b w_b (y_b - x_b . beta - beta0)^2 + ridge * ||beta||^2;
    the intercept is fit but not penalized and never ranked.
    """
    y = np.asarray(predictions, dtype=float)
    w = np.asarray(weights, dtype=float)
    m = batch.matrix.astype(float)
    b, k = m.shape
    if len(y) != b or len(w) != b:
        raise LengthMismatch(f"{b} perturbations vs {len(y)} predictions, {len(w)} weights")
    if int((w > 0).sum()) < k + 1:
        warnings.warn(
            f"only {int((w > 0).sum())} positive-weight rows for {k}+1 unknowns",
            RankDeficientWarning,
        )
    x = np.hstack([np.ones((b, 1)), m])
    reg = np.eye(k + 1) * ridge_penalty
    reg[0, 0] = 0.0
    xtw = x.T * w
    lhs = xtw @ x + reg
    rhs = xtw @ y
    try:
        beta = np.linalg.solve(lhs, rhs)
        if not np.isfinite(beta).all():
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        bumped = max(ridge_penalty * 1e6, 1e-3)
        warnings.warn(
            f"rank-deficient surrogate system; retrying with ridge {bumped}",
            RankDeficientWarning,
        )
        reg = np.eye(k + 1) * bumped
        reg[0, 0] = 0.0
        beta = np.linalg.lstsq(xtw @ x + reg, rhs, rcond=None)[0]

    resid = y - x @ beta
    wsum = w.sum()
    if wsum > 0:
        ybar = float((w * y).sum() / wsum)
        ss_tot = float((w * (y - ybar) ** 2).sum())
        ss_res = float((w * resid**2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    else:
        r2 = 0.0
    return beta[1:], float(beta[0]), float(r2)


def explain(stack, checkpoint: baseline.ModelCheckpoint, cfg: ExplainerConfig) -> ExplanationResult:
    """segment -> perturb -> score -> weight -> fit -> top-superpixel mask."""
    arr = _as_stack(stack)
    spmap = segment(arr, cfg.n_segments, cfg.compactness, cfg.max_iter)
    k = spmap.num_segments
    if cfg.num_perturbations < k + 1:
        warnings.warn(
            f"{cfg.num_perturbations} perturbations for {k} superpixels underdetermines the fit",
            RankDeficientWarning,
        )
    batch = make_perturbations(cfg.num_perturbations, k, cfg.seed)
    perturbed = perturb(arr, spmap, batch, cfg.fill_value)
    probs = np.concatenate(
        [
            baseline.predict_batch(checkpoint, list(perturbed[i : i + 50]))
            for i in range(0, len(perturbed), 50)
        ]
    )
    weights = perturbation_weights(batch, cfg.kernel_width)
    coefficients, _, r2 = fit_surrogate(batch, probs, weights, cfg.ridge_penalty)
    top = int(np.argmax(coefficients))  # argmax takes the lowest id on ties
    mask = np.repeat((spmap.labels == top)[None], 3, axis=0)
    return ExplanationResult(
        coefficients=coefficients, top_superpixel_id=top, mask=mask, surrogate_r2=r2
    )


# ---------------------------------------------------------------------------
# True-positive mask corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusPair:
    sample_id: str
    stack: np.ndarray  # (3, h, w) float32
    mask: np.ndarray  # (3, h, w) bool
    top_superpixel_id: int
    coefficients: np.ndarray
    surrogate_r2: float


def build_mask_corpus(
    dataset: TaskDataset,
    checkpoint: baseline.ModelCheckpoint,
    cfg: ExplainerConfig,
    samples: list[TripletSample] | None = None,
) -> list[CorpusPair]:
    """Explain every true positive (label P, predicted P); aligned pairs out."""
    pool = dataset.samples if samples is None else samples
    positives = [s for s in pool if s.label == "P"]
    probs = baseline.predict_batch(checkpoint, positives) if positives else np.array([])
    pairs = []
    for s, p in zip(positives, probs):
        if p < 0.5:
            continue
        res = explain(s, checkpoint, cfg)
        pairs.append(
            CorpusPair(
                sample_id=s.sample_id,
                stack=s.stack,
                mask=res.mask,
                top_superpixel_id=res.top_superpixel_id,
                coefficients=res.coefficients,
                surrogate_r2=res.surrogate_r2,
            )
        )
    if not pairs:
        raise EmptyCorpus("classifier produced no true positives to explain")
    return pairs


def save_mask_corpus(pairs: list[CorpusPair], out_dir: Path) -> Path:
    """One directory per pair: stack.raw, mask.raw, meta.json."""
    out_dir = Path(out_dir)
    for pair in pairs:
        d = out_dir / pair.sample_id
        d.mkdir(parents=True, exist_ok=True)
        (d / "stack.raw").write_bytes(np.ascontiguousarray(pair.stack, dtype="<f4").tobytes())
        (d / "mask.raw").write_bytes(np.ascontiguousarray(pair.mask, dtype=np.uint8).tobytes())
        meta = {
            "sample_id": pair.sample_id,
            "shape": list(pair.stack.shape),
            "top_id": pair.top_superpixel_id,
            "coefficients": [float(c) for c in pair.coefficients],
            "r2": pair.surrogate_r2,
        }
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return out_dir


def load_mask_corpus(corpus_dir: Path) -> list[CorpusPair]:
    corpus_dir = Path(corpus_dir)
    pairs = []
    for d in sorted(p for p in corpus_dir.iterdir() if p.is_dir()):
        try:
            meta = json.loads((d / "meta.json").read_text())
            shape = tuple(meta["shape"])
            stack = np.frombuffer((d / "stack.raw").read_bytes(), dtype="<f4").reshape(shape)
            mask = np.frombuffer((d / "mask.raw").read_bytes(), dtype=np.uint8).reshape(shape)
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise UnreadableFile(f"corrupt corpus entry {d}: {exc}") from exc
        pairs.append(
            CorpusPair(
                sample_id=meta["sample_id"],
                stack=stack.astype(np.float32),
                mask=mask.astype(bool),
                top_superpixel_id=int(meta["top_id"]),
                coefficients=np.array(meta["coefficients"]),
                surrogate_r2=float(meta["r2"]),
            )
        )
    if not pairs:
        raise EmptyCorpus(f"no corpus entries under {corpus_dir}")
    return pairs
