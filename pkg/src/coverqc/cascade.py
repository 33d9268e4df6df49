"""Two-stage detector: classify, then re-score negatives on their salient region.

Stage one is the per-task 3D CNN. Any stack it calls negative is handed to
the attention U-Net, which predicts the salient region; the stack is masked
to that region (voxelwise product) and scored a second time. The second
score is final. Positives are never re-scored, so recall cannot drop; every
input sample yields exactly one audit decision.

The re-prediction path is label-free: it keys on the model's own negative
call, never on ground truth, so it is usable at deployment where labels do
not exist. Evaluating the decisions against labels is the harness's job.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from . import baseline, segmenter
from .dataprep.triplets import TaskDataset, TripletSample
from .errors import IOFailure
from .explainer import CorpusPair, ExplainerConfig, build_mask_corpus, save_mask_corpus

# Recovery counts reported for the original large-cohort evaluation
# (misclassified before -> after re-prediction). Context only: they are not
# reproducible without that cohort and are never asserted by tests.
REFERENCE_RECOVERY = {"apex": (473, 303), "basal": (381, 253)}


@dataclass(frozen=True)
class CascadeDecision:
    sample_id: str
    initial_probability: float
    initial_label: str  # "P" or "N"
    reprediction_applied: bool
    final_probability: float
    final_label: str

    def __post_init__(self) -> None:
        for name in ("initial_label", "final_label"):
            if getattr(self, name) not in ("P", "N"):
                raise ValueError(f"{name} must be 'P' or 'N', got {getattr(self, name)!r}")
        if self.reprediction_applied != (self.initial_label == "N"):
            raise ValueError("reprediction_applied must hold exactly for initial negatives")
        if self.initial_label == "P" and (
            self.final_label != "P" or self.final_probability != self.initial_probability
        ):
            raise ValueError("initial positives must pass through unchanged")


def run_algorithm1(
    dataset: TaskDataset,
    baseline_ckpt: baseline.ModelCheckpoint,
    explainer_cfg: ExplainerConfig | None = None,
    unet_cfg: segmenter.UNetTrainConfig | None = None,
    unet_spec: segmenter.UNetSpec | None = None,
    samples: Sequence[TripletSample] | None = None,
    corpus_dir: Path | None = None,
) -> tuple[list[CorpusPair], baseline.ModelCheckpoint]:
    """Baseline true positives -> explainer mask corpus -> trained U-Net.

    Composes explainer.build_mask_corpus with segmenter.train_unet for one
    task. `samples` restricts the corpus source (defaults to the whole
    dataset); `corpus_dir`, when given, persists the corpus pairs.
    """
    explainer_cfg = explainer_cfg or ExplainerConfig()
    unet_cfg = unet_cfg or segmenter.UNetTrainConfig()
    corpus = build_mask_corpus(dataset, baseline_ckpt, explainer_cfg, samples=samples)
    if corpus_dir is not None:
        save_mask_corpus(corpus, corpus_dir)
    unet_ckpt = segmenter.train_unet(corpus, unet_cfg, spec=unet_spec, task=f"{dataset.task}-unet")
    return corpus, unet_ckpt


def improve_predictions(
    samples: Sequence[TripletSample],
    baseline_ckpt: baseline.ModelCheckpoint,
    unet_ckpt: baseline.ModelCheckpoint,
    threshold: float = 0.5,
) -> list[CascadeDecision]:
    """Score every sample; re-score the negatives on their salient regions.

    Label-free: applies to every stack the classifier calls negative,
    regardless of ground truth. Returns one decision per input sample, in
    input order; reruns on the same input are deterministic, and label
    decisions do not depend on input order (probabilities agree only to
    float32 batch-order noise).
    """
    samples = list(samples)
    if not samples:
        return []
    probs = baseline.predict_batch(baseline_ckpt, [s.stack for s in samples])
    decisions: list[CascadeDecision | None] = [None] * len(samples)
    negatives = []
    for i, (s, p) in enumerate(zip(samples, probs)):
        p = float(p)
        if baseline.classify(p, threshold) == "P":
            decisions[i] = CascadeDecision(
                sample_id=s.sample_id,
                initial_probability=p,
                initial_label="P",
                reprediction_applied=False,
                final_probability=p,
                final_label="P",
            )
        else:
            negatives.append(i)

    if negatives:
        neg_stacks = [samples[i].stack for i in negatives]
        masks = segmenter.predict_mask_batch(unet_ckpt, neg_stacks)
        masked = [
            segmenter.apply_salient_region(stack, mask)
            for stack, mask in zip(neg_stacks, masks)
        ]
        reprobs = baseline.predict_batch(baseline_ckpt, masked)
        for i, p2 in zip(negatives, reprobs):
            p2 = float(p2)
            decisions[i] = CascadeDecision(
                sample_id=samples[i].sample_id,
                initial_probability=float(probs[i]),
                initial_label="N",
                reprediction_applied=True,
                final_probability=p2,
                final_label=baseline.classify(p2, threshold),
            )
    return decisions  # type: ignore[return-value]


def improve_training_set_report(
    samples: Sequence[TripletSample],
    baseline_ckpt: baseline.ModelCheckpoint,
    unet_ckpt: baseline.ModelCheckpoint,
    threshold: float = 0.5,
) -> dict:
    """Label-aware audit of the re-prediction stage on one task's samples.

    Counts misclassifications before and after the cascade and the fraction
    of them the second stage repaired. With a perfect first stage there is
    nothing to recover and the fraction is reported as None (n/a).
    """
    samples = list(samples)
    decisions = improve_predictions(samples, baseline_ckpt, unet_ckpt, threshold)
    truth = {s.sample_id: s.label for s in samples}
    before = sum(1 for d in decisions if d.initial_label != truth[d.sample_id])
    after = sum(1 for d in decisions if d.final_label != truth[d.sample_id])
    tasks = {s.task for s in samples}
    return {
        "task": tasks.pop() if len(tasks) == 1 else sorted(tasks),
        "n_samples": len(samples),
        "misclassified_before": before,
        "misclassified_after": after,
        "recovery_fraction": None if before == 0 else (before - after) / before,
    }


# ---------------------------------------------------------------------------
# Decision audit I/O: JSON lines, one decision per line
# ---------------------------------------------------------------------------


def save_decisions(decisions: Sequence[CascadeDecision], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for d in decisions:
            fh.write(json.dumps(asdict(d), sort_keys=True, separators=(",", ":")) + "\n")
    return path


def load_decisions(path: Path) -> list[CascadeDecision]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read decisions file {path}: {exc}") from exc
    return [CascadeDecision(**json.loads(line)) for line in lines if line.strip()]
