"""Metrics, ROC/AUC, cross-validation orchestration, report emission."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TINY_ARCH, TINY_UNET_SPEC, make_disk_samples
from coverqc.baseline import TrainConfig
from coverqc.dataprep.triplets import TaskDataset, make_folds
from coverqc.errors import LengthMismatch
from coverqc.explainer import ExplainerConfig
from coverqc.harness import (
    METRIC_NAMES,
    MODES,
    ConfusionCounts,
    PipelineConfig,
    aggregate,
    auc_trapezoid,
    confusion,
    crossvalidate,
    emit_report,
    metrics,
    roc_points,
)
from coverqc.segmenter import UNetTrainConfig


class TestConfusion:
    def test_hand_counted_example(self):
        c = confusion(list("PPNNPN"), list("PPPNNN"))
        assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 2)
        assert c.total == 6

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            confusion(["P"], ["P", "N"])

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1, fp=0, fn=0, tn=0)


class TestMetrics:
    def test_hand_counted_oracle(self):
        # tp=3 tn=2 fp=1 fn=0
        r = metrics(ConfusionCounts(tp=3, fp=1, fn=0, tn=2))
        assert r.accuracy == pytest.approx(5.0 / 6.0, abs=1e-6)
        assert r.precision == pytest.approx(0.75, abs=1e-6)
        assert r.recall == pytest.approx(1.0, abs=1e-6)
        assert r.f_measure == pytest.approx(0.857142857, abs=1e-6)
        assert r.undefined == ("auc",)  # no scores were provided
        assert r.n_samples == 6

    def test_empty_denominators_flagged_not_raised(self):
        r = metrics(ConfusionCounts(tp=0, fp=0, fn=0, tn=4))
        assert r.precision == 0.0 and "precision" in r.undefined
        assert r.recall == 0.0 and "recall" in r.undefined
        assert r.f_measure == 0.0 and "f_measure" in r.undefined
        assert r.accuracy == 1.0

    def test_zero_total(self):
        r = metrics(ConfusionCounts(0, 0, 0, 0))
        assert r.accuracy == 0.0 and "accuracy" in r.undefined

    def test_scores_populate_roc_and_auc(self):
        labels = ["P", "P", "N", "N"]
        scores = [0.9, 0.8, 0.3, 0.1]
        r = metrics(confusion(labels, ["P", "P", "N", "N"]), labels, scores)
        assert r.auc == 1.0
        assert r.roc is not None
        assert "auc" not in r.undefined


class TestRocAuc:
    def test_perfect_and_inverted_ranking(self):
        labels = ["P", "P", "N", "N"]
        assert auc_trapezoid(labels, [0.9, 0.8, 0.2, 0.1]) == 1.0
        assert auc_trapezoid(labels, [0.1, 0.2, 0.8, 0.9]) == 0.0

    def test_single_class_has_no_auc(self):
        assert auc_trapezoid(["P", "P"], [0.4, 0.6]) is None
        assert auc_trapezoid(["N", "N"], [0.4, 0.6]) is None

    def test_ties_take_half_credit(self):
        # one P and one N sharing a score contribute 0.5
        assert auc_trapezoid(["P", "N"], [0.5, 0.5]) == pytest.approx(0.5)
        assert auc_trapezoid(["P", "N", "N"], [0.7, 0.7, 0.1]) == pytest.approx(0.75)

    def test_staircase_shape(self):
        labels = ["P", "N", "P", "N", "P"]
        scores = [0.9, 0.8, 0.7, 0.4, 0.2]
        fpr, tpr = roc_points(labels, scores)
        assert fpr[0] == 0.0 and tpr[0] == 0.0
        assert fpr[-1] == 1.0 and tpr[-1] == 1.0
        assert (np.diff(fpr) >= 0).all() and (np.diff(tpr) >= 0).all()

    def test_roc_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            roc_points(["P", "N"], [0.5])

    @given(st.integers(0, 10_000))
    def test_matches_rank_statistic(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 30))
        labels = ["P" if v else "N" for v in rng.integers(0, 2, n)]
        if "P" not in labels or "N" not in labels:
            labels[0], labels[1] = "P", "N"
        scores = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], n)  # force ties
        pos = [s for l, s in zip(labels, scores) if l == "P"]
        neg = [s for l, s in zip(labels, scores) if l == "N"]
        pairs = [(p > q) + 0.5 * (p == q) for p in pos for q in neg]
        assert auc_trapezoid(labels, scores) == pytest.approx(np.mean(pairs), abs=1e-12)


class TestAggregate:
    def _fold(self, acc, fold):
        tp = int(round(acc * 10))
        return metrics(ConfusionCounts(tp=tp, fp=0, fn=10 - tp, tn=0), fold=fold)

    def test_mean_and_both_deviations(self):
        folds = [self._fold(0.9, 0), self._fold(0.7, 1)]
        agg = aggregate(folds, task="apex", mode="baseline")
        assert agg.accuracy == pytest.approx(0.8)
        assert agg.mean["accuracy"] == pytest.approx(0.8)
        assert agg.sd_population["accuracy"] == pytest.approx(0.1)
        assert agg.sd_sample["accuracy"] == pytest.approx(0.1 * np.sqrt(2.0))
        assert agg.per_fold == tuple(folds)
        assert agg.n_samples == 20

    def test_zero_folds_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_single_fold_sample_sd_zero(self):
        agg = aggregate([self._fold(0.9, 0)])
        assert agg.sd_sample["accuracy"] == 0.0


def _pipeline_cfg(**kw):
    base = dict(
        arch=TINY_ARCH,
        train=TrainConfig(
            learning_rate=0.005, epochs=25, batch_size=8, momentum=0.9, val_fraction=0.1, seed=0
        ),
        explainer=ExplainerConfig(num_perturbations=60, seed=0),
        unet_spec=TINY_UNET_SPEC,
        unet_train=UNetTrainConfig(epochs=3, batch_size=4, seed=0),
        corpus_per_fold=6,
        seed=0,
    )
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def cv_dataset():
    samples, _ = make_disk_samples("apex", 14)
    return make_folds(samples, 2, seed=0)


@pytest.fixture(scope="module")
def cv_reports(cv_dataset):
    cfg = _pipeline_cfg()
    return {mode: crossvalidate(cv_dataset, cfg, mode=mode) for mode in MODES}


class TestCrossvalidate:
    def test_invalid_mode(self, cv_dataset):
        with pytest.raises(ValueError):
            crossvalidate(cv_dataset, _pipeline_cfg(), mode="oracle")

    def test_modes_exported(self):
        assert MODES == ("baseline", "cascade", "cascade-labeled")

    def test_baseline_report_shape(self, cv_dataset, cv_reports):
        rep = cv_reports["baseline"]
        assert len(rep.per_fold) == cv_dataset.k
        assert rep.task == "apex" and rep.mode == "baseline"
        assert rep.n_samples == len(cv_dataset.samples)
        for f in rep.per_fold:
            assert f.n_samples == len(cv_dataset.test_samples(f.fold))
            assert 0.0 <= f.accuracy <= 1.0
            assert f.roc is not None

    def test_leaky_folds_refused(self, cv_dataset):
        class Leaky(TaskDataset):
            def train_samples(self, fold):
                return list(self.samples)  # test samples leak into training

        leaky = Leaky(
            task=cv_dataset.task,
            samples=cv_dataset.samples,
            fold_assignment=cv_dataset.fold_assignment,
        )
        with pytest.raises(RuntimeError):
            crossvalidate(leaky, _pipeline_cfg(), mode="baseline")

    def test_cascade_recall_never_below_baseline(self, cv_reports):
        base, casc, lab = (cv_reports[m] for m in MODES)
        for b, c, l in zip(base.per_fold, casc.per_fold, lab.per_fold):
            assert c.counts.fn <= b.counts.fn
            assert l.counts.fn <= b.counts.fn
            # conditioning on labels can only drop spurious positive flips
            assert l.counts.fp <= c.counts.fp


class TestEmitReport:
    def test_bundle_contents(self, cv_dataset, cv_reports, tmp_path):
        reports = [cv_reports["baseline"]]
        paths = emit_report(reports, tmp_path / "report")
        payload = json.loads(paths["report_json"].read_text())
        assert len(payload["reports"]) == 1
        assert payload["reports"][0]["task"] == "apex"
        assert "reference_context" in payload
        assert set(payload["reference_context"]["accuracy"]) == {"baseline", "cascade"}

        rows = paths["tables_csv"].read_text().strip().splitlines()
        assert rows[0].split(",")[:3] == ["task", "mode", "fold"]
        assert len(rows) == 1 + cv_dataset.k + 1  # header + folds + Avg+/-SD
        assert "Avg+/-SD" in rows[-1]
        assert len(paths["roc_plots"]) == cv_dataset.k
        assert {p.name for p in paths["roc_plots"]} == {
            f"roc_fold{i}.png" for i in range(cv_dataset.k)
        }

    def test_bundle_bytes_reproducible(self, cv_reports, tmp_path):
        reports = [cv_reports["baseline"]]
        a = emit_report(reports, tmp_path / "a")
        b = emit_report(reports, tmp_path / "b")
        assert a["report_json"].read_bytes() == b["report_json"].read_bytes()
        assert a["tables_csv"].read_bytes() == b["tables_csv"].read_bytes()
        for pa, pb in zip(a["roc_plots"], b["roc_plots"]):
            assert pa.read_bytes() == pb.read_bytes()

    def test_multi_report_plot_names_carry_task_and_mode(self, cv_reports, tmp_path):
        rep = cv_reports["baseline"]
        paths = emit_report([rep, rep], tmp_path / "multi")
        assert all(p.name.startswith("roc_apex_baseline_fold") for p in paths["roc_plots"])

    def test_empty_reports_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], tmp_path)
