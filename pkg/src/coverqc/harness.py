"""Classification metrics, k-fold cross-validation, and report emission.

Metrics follow the usual confusion-matrix definitions; AUC is the trapezoidal
integral of the ROC curve swept over every distinct score threshold, which
equals the Mann-Whitney statistic with half-credit for ties. Undefined
ratios (empty denominators) are reported as 0.0 and flagged rather than
raised, so degenerate folds never abort a run.

Cross-validation retrains the pipeline per fold on the fold's complement and
never lets a training sample id reach its own test fold. Three modes:

- "baseline": first-stage classifier alone.
- "cascade": label-free re-prediction of every negative on its salient region.
- "cascade-labeled": replication mode mirroring the original experiment,
  which re-predicted only ground-truth positives; it leaks labels into the
  decision rule and exists for comparison, never for deployment.

Fold means are paired with both population and sample standard deviations;
the Avg+/-SD table row uses the population form.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baseline as baseline_mod
from . import cascade as cascade_mod
from . import segmenter
from .baseline import BaselineArchitectureSpec, TrainConfig
from .dataprep.augment import AugmentationSpec
from .dataprep.triplets import TaskDataset
from .errors import IOFailure, LengthMismatch
from .explainer import ExplainerConfig, build_mask_corpus

METRIC_NAMES = ("accuracy", "precision", "recall", "f_measure", "auc")
MODES = ("baseline", "cascade", "cascade-labeled")

# Published large-cohort results (mean+/-SD over 5 folds) for context in
# emitted reports. They depend on a restricted dataset and are never
# asserted by tests.
REFERENCE_RESULTS = {
    "baseline": {"apex": "94.51+/-0.95", "basal": "96.25+/-0.51"},
    "cascade": {"apex": "95.72+/-1.03", "basal": "96.88+/-0.38"},
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f_measure: float
    auc: float
    undefined: tuple[str, ...] = ()  # metrics whose denominator was empty
    counts: ConfusionCounts | None = None
    fold: int | None = None
    n_samples: int = 0
    roc: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    task: str = ""
    mode: str = ""
    per_fold: tuple["MetricsReport", ...] = ()
    mean: dict | None = None
    sd_population: dict | None = None
    sd_sample: dict | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["per_fold"] = [f.to_dict() for f in self.per_fold]
        if self.counts is not None:
            d["counts"] = dataclasses.asdict(self.counts)
        return d


def confusion(labels: Sequence[str], predictions: Sequence[str]) -> ConfusionCounts:
    """Exact counts with "P" as the positive class."""
    if len(labels) != len(predictions):
        raise LengthMismatch(f"{len(labels)} labels vs {len(predictions)} predictions")
    tp = fp = fn = tn = 0
    for y, p in zip(labels, predictions):
        if y == "P":
            tp, fn = tp + (p == "P"), fn + (p != "P")
        else:
            fp, tn = fp + (p == "P"), tn + (p != "P")
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def roc_points(labels: Sequence[str], scores: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """ROC staircase (FPR, TPR) swept over every distinct score threshold."""
    if len(labels) != len(scores):
        raise LengthMismatch(f"{len(labels)} labels vs {len(scores)} scores")
    y = np.asarray([1 if l == "P" else 0 for l in labels])
    s = np.asarray(scores, dtype=float)
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        return np.array([0.0, 1.0]), np.array([0.0, 1.0])
    order = np.argsort(-s, kind="stable")
    y, s = y[order], s[order]
    fpr, tpr = [0.0], [0.0]
    tp = fp = 0
    i = 0
    while i < len(y):
        j = i
        while j < len(y) and s[j] == s[i]:  # ties move together
            tp += y[j]
            fp += 1 - y[j]
            j += 1
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        i = j
    return np.asarray(fpr), np.asarray(tpr)


def auc_trapezoid(labels: Sequence[str], scores: Sequence[float]) -> float | None:
    """Trapezoidal area under the threshold-swept ROC; None if one class only."""
    y = [1 if l == "P" else 0 for l in labels]
    if sum(y) in (0, len(y)):
        return None
    fpr, tpr = roc_points(labels, scores)
    integrate = getattr(np, "trapezoid", np.trapz)
    return float(integrate(tpr, fpr))


def metrics(
    c: ConfusionCounts,
    labels: Sequence[str] | None = None,
    scores: Sequence[float] | None = None,
    fold: int | None = None,
    task: str = "",
    mode: str = "",
) -> MetricsReport:
    """Single-fold metrics; empty denominators yield 0.0 plus an entry in
    `undefined` instead of raising."""
    undefined = []
    total = c.total
    accuracy = (c.tp + c.tn) / total if total else _flag(undefined, "accuracy")
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else _flag(undefined, "precision")
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else _flag(undefined, "recall")
    if precision + recall > 0:
        f_measure = 2.0 * precision * recall / (precision + recall)
    else:
        f_measure = _flag(undefined, "f_measure")

    auc_val = None
    roc = None
    if labels is not None and scores is not None:
        auc_val = auc_trapezoid(labels, scores)
        fpr, tpr = roc_points(labels, scores)
        roc = (tuple(float(v) for v in fpr), tuple(float(v) for v in tpr))
    auc = auc_val if auc_val is not None else _flag(undefined, "auc")

    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f_measure=f_measure,
        auc=auc,
        undefined=tuple(undefined),
        counts=c,
        fold=fold,
        n_samples=total,
        roc=roc,
        task=task,
        mode=mode,
    )


def _flag(undefined: list, name: str) -> float:
    undefined.append(name)
    return 0.0


def aggregate(per_fold: Sequence[MetricsReport], task: str = "", mode: str = "") -> MetricsReport:
    """Fold-mean report; carries both population and sample SDs per metric."""
    if not per_fold:
        raise ValueError("cannot aggregate zero folds")
    values = {m: np.array([getattr(f, m) for f in per_fold], dtype=float) for m in METRIC_NAMES}
    mean = {m: float(v.mean()) for m, v in values.items()}
    sd_pop = {m: float(v.std(ddof=0)) for m, v in values.items()}
    sd_smp = {m: float(v.std(ddof=1)) if len(v) > 1 else 0.0 for m, v in values.items()}
    return MetricsReport(
        accuracy=mean["accuracy"],
        precision=mean["precision"],
        recall=mean["recall"],
        f_measure=mean["f_measure"],
        auc=mean["auc"],
        n_samples=sum(f.n_samples for f in per_fold),
        task=task,
        mode=mode,
        per_fold=tuple(per_fold),
        mean=mean,
        sd_population=sd_pop,
        sd_sample=sd_smp,
    )


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob one cross-validated run needs, serializable as a dict."""

    arch: BaselineArchitectureSpec = field(default_factory=BaselineArchitectureSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationSpec | None = None
    explainer: ExplainerConfig = field(default_factory=ExplainerConfig)
    unet_spec: segmenter.UNetSpec = field(default_factory=segmenter.UNetSpec)
    unet_train: segmenter.UNetTrainConfig = field(default_factory=segmenter.UNetTrainConfig)
    corpus_per_fold: int | None = None  # cap on explained TPs per fold
    threshold: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"] = self.arch.to_dict()
        d["unet_spec"] = self.unet_spec.to_dict()
        return d


def crossvalidate(dataset: TaskDataset, cfg: PipelineConfig, mode: str = "baseline") -> MetricsReport:
    """Per-fold retrain/evaluate over the dataset's fold assignment.

    Each fold's model trains only on the other folds; a defensive check
    refuses any overlap between train and test sample ids. Cascade modes
    build the mask corpus and U-Net from the fold's training split only.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    per_fold = []
    for fold in range(dataset.k):
        train_samples = dataset.train_samples(fold)
        test_samples = dataset.test_samples(fold)
        overlap = {s.sample_id for s in train_samples} & {s.sample_id for s in test_samples}
        if overlap:
            raise RuntimeError(f"fold {fold} leaks {len(overlap)} sample ids into its test set")

        fold_train_cfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + fold)
        model = baseline_mod.build_model(cfg.arch, fold_train_cfg.seed)
        ckpt = baseline_mod.train_on_samples(
            model, dataset.task, train_samples, fold_train_cfg, cfg.augmentation
        )

        labels = [s.label for s in test_samples]
        probs = baseline_mod.predict_batch(ckpt, [s.stack for s in test_samples])
        if mode == "baseline":
            preds = [baseline_mod.classify(float(p), cfg.threshold) for p in probs]
            scores = [float(p) for p in probs]
        else:
            unet_ckpt = _fold_unet(dataset, ckpt, train_samples, cfg, fold)
            decisions = cascade_mod.improve_predictions(test_samples, ckpt, unet_ckpt, cfg.threshold)
            if mode == "cascade-labeled":
                decisions = _condition_on_labels(decisions, {s.sample_id: s.label for s in test_samples})
            preds = [d.final_label for d in decisions]
            scores = [d.final_probability for d in decisions]

        per_fold.append(
            metrics(confusion(labels, preds), labels, scores, fold=fold, task=dataset.task, mode=mode)
        )
    return aggregate(per_fold, task=dataset.task, mode=mode)


def _fold_unet(dataset, ckpt, train_samples, cfg: PipelineConfig, fold: int):
    corpus_source = [s for s in train_samples if s.label == "P"]
    if cfg.corpus_per_fold is not None and len(corpus_source) > cfg.corpus_per_fold:
        rng = np.random.default_rng([cfg.seed, fold])
        keep = rng.choice(len(corpus_source), size=cfg.corpus_per_fold, replace=False)
        corpus_source = [corpus_source[i] for i in sorted(keep)]
    corpus = build_mask_corpus(dataset, ckpt, cfg.explainer, samples=corpus_source)
    return segmenter.train_unet(
        corpus, cfg.unet_train, spec=cfg.unet_spec, task=f"{dataset.task}-unet"
    )


def _condition_on_labels(decisions, truth: dict) -> list:
    """Replication mode: keep the re-prediction only for true positives."""
    out = []
    for d in decisions:
        if d.reprediction_applied and truth[d.sample_id] == "N":
            out.append(
                cascade_mod.CascadeDecision(
                    sample_id=d.sample_id,
                    initial_probability=d.initial_probability,
                    initial_label=d.initial_label,
                    reprediction_applied=True,
                    final_probability=d.initial_probability,
                    final_label=d.initial_label,
                )
            )
        else:
            out.append(d)
    return out


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def emit_report(reports: Sequence[MetricsReport], out_dir: Path) -> dict:
    """Write report.json, tables.csv and per-fold ROC plots.

    Output bytes are a pure function of the inputs: no timestamps, sorted
    keys, fixed float formatting, and metadata-stripped PNGs.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report to emit")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "report_json": _write_json(reports, out_dir / "report.json"),
            "tables_csv": _write_tables(reports, out_dir / "tables.csv"),
        }
        paths["roc_plots"] = _write_roc_plots(reports, out_dir)
    except OSError as exc:
        raise IOFailure(f"cannot write report bundle under {out_dir}: {exc}") from exc
    return paths


def _write_json(reports, path: Path) -> Path:
    payload = {
        "reports": [r.to_dict() for r in reports],
        "reference_context": {
            "note": (
                "published large-cohort results, mean+/-SD over 5 folds; "
                "context only, not reproducible from this run"
            ),
            "accuracy": REFERENCE_RESULTS,
        },
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def _write_tables(reports, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "mode", "fold"] + list(METRIC_NAMES))
        for r in reports:
            folds = r.per_fold or (r,)
            for f in folds:
                w.writerow(
                    [f.task, f.mode, f.fold if f.fold is not None else 0]
                    + [_fmt(getattr(f, m)) for m in METRIC_NAMES]
                )
            if r.per_fold:
                w.writerow(
                    [r.task, r.mode, "Avg+/-SD"]
                    + [f"{_fmt(r.mean[m])}+/-{_fmt(r.sd_population[m])}" for m in METRIC_NAMES]
                )
    return path


def _write_roc_plots(reports, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for r in reports:
        folds = r.per_fold or (r,)
        tag = f"{r.task}_{r.mode}".strip("_")
        # single-report bundles keep the plain roc_fold{i}.png names
        prefix = "roc" if len(reports) == 1 else (f"roc_{tag}" if tag else "roc")
        for f in folds:
            if f.roc is None:
                continue
            fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
            ax.plot(f.roc[0], f.roc[1], drawstyle="steps-post")
            ax.plot([0, 1], [0, 1], linestyle="--", linewidth=0.8)
            ax.set_xlabel("false positive rate")
            ax.set_ylabel("true positive rate")
            ax.set_title(f"{tag} fold {f.fold} AUC={_fmt(f.auc)}")
            fig.tight_layout()
            p = out_dir / f"{prefix}_fold{f.fold}.png"
            fig.savefig(p, metadata={"Software": None})
            plt.close(fig)
            written.append(p)
    return written
