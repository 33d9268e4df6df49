"""Cascade re-prediction: decision invariants, audits, corpus pipeline."""

import numpy as np
import pytest

from coverqc.baseline import classify, predict_batch
from coverqc.cascade import (
    CascadeDecision,
    improve_predictions,
    improve_training_set_report,
    load_decisions,
    run_algorithm1,
    save_decisions,
)
from coverqc.errors import IOFailure
from coverqc.explainer import ExplainerConfig
from coverqc.segmenter import UNetTrainConfig

from conftest import TINY_UNET_SPEC


def _decision(**kw):
    base = dict(
        sample_id="s",
        initial_probability=0.3,
        initial_label="N",
        reprediction_applied=True,
        final_probability=0.7,
        final_label="P",
    )
    base.update(kw)
    return CascadeDecision(**base)


class TestDecisionInvariants:
    def test_valid_recovery_decision(self):
        d = _decision()
        assert d.reprediction_applied
        assert d.final_label == "P"

    def test_labels_must_be_p_or_n(self):
        with pytest.raises(ValueError):
            _decision(initial_label="X", reprediction_applied=False)
        with pytest.raises(ValueError):
            _decision(final_label="maybe")

    def test_reprediction_flag_tied_to_initial_negative(self):
        with pytest.raises(ValueError):
            _decision(initial_label="N", reprediction_applied=False, final_label="N")
        with pytest.raises(ValueError):
            _decision(
                initial_label="P",
                initial_probability=0.9,
                reprediction_applied=True,
                final_probability=0.9,
                final_label="P",
            )

    def test_initial_positive_is_frozen(self):
        # positives bypass the second stage entirely
        with pytest.raises(ValueError):
            _decision(
                initial_label="P",
                initial_probability=0.9,
                reprediction_applied=False,
                final_probability=0.9,
                final_label="N",
            )
        with pytest.raises(ValueError):
            _decision(
                initial_label="P",
                initial_probability=0.9,
                reprediction_applied=False,
                final_probability=0.8,
                final_label="P",
            )


class TestImprovePredictions:
    def test_one_decision_per_sample_in_order(self, apex_bundle, tiny_unet_ckpt):
        dataset, ckpt, _ = apex_bundle
        decisions = improve_predictions(dataset.samples, ckpt, tiny_unet_ckpt)
        assert [d.sample_id for d in decisions] == [s.sample_id for s in dataset.samples]

    def test_positives_untouched_negatives_rescored(self, apex_bundle, tiny_unet_ckpt):
        dataset, ckpt, _ = apex_bundle
        probs = predict_batch(ckpt, [s.stack for s in dataset.samples])
        decisions = improve_predictions(dataset.samples, ckpt, tiny_unet_ckpt)
        for d, p in zip(decisions, probs):
            assert d.initial_probability == pytest.approx(float(p))
            assert d.initial_label == classify(float(p))
            if d.initial_label == "P":
                assert not d.reprediction_applied
                assert d.final_probability == d.initial_probability
                assert d.final_label == "P"
            else:
                assert d.reprediction_applied
                assert d.final_label == classify(d.final_probability)

    def test_false_negatives_never_increase(self, apex_bundle, tiny_unet_ckpt):
        dataset, ckpt, _ = apex_bundle
        truth = {s.sample_id: s.label for s in dataset.samples}
        decisions = improve_predictions(dataset.samples, ckpt, tiny_unet_ckpt)
        fn_before = sum(
            1 for d in decisions if truth[d.sample_id] == "P" and d.initial_label == "N"
        )
        fn_after = sum(
            1 for d in decisions if truth[d.sample_id] == "P" and d.final_label == "N"
        )
        assert fn_after <= fn_before

    def test_label_free_and_order_independent(self, apex_bundle, tiny_unet_ckpt):
        # labels match exactly; probabilities only to float32 batch-order noise
        dataset, ckpt, _ = apex_bundle
        forward = improve_predictions(dataset.samples, ckpt, tiny_unet_ckpt)
        backward = improve_predictions(dataset.samples[::-1], ckpt, tiny_unet_ckpt)
        by_id = {d.sample_id: d for d in backward}
        for d in forward:
            twin = by_id[d.sample_id]
            assert twin.initial_label == d.initial_label
            assert twin.final_label == d.final_label
            assert twin.reprediction_applied == d.reprediction_applied
            assert twin.initial_probability == pytest.approx(d.initial_probability, abs=1e-5)
            assert twin.final_probability == pytest.approx(d.final_probability, abs=1e-5)

    def test_threshold_above_one_repredicts_everything(self, apex_bundle, tiny_unet_ckpt):
        dataset, ckpt, _ = apex_bundle
        decisions = improve_predictions(dataset.samples[:6], ckpt, tiny_unet_ckpt, threshold=1.1)
        assert all(d.initial_label == "N" and d.reprediction_applied for d in decisions)
        assert all(d.final_label == "N" for d in decisions)  # probabilities stay < 1.1

    def test_empty_input(self, apex_bundle, tiny_unet_ckpt):
        _, ckpt, _ = apex_bundle
        assert improve_predictions([], ckpt, tiny_unet_ckpt) == []


class TestTrainingSetAudit:
    def test_counts_match_a_hand_recount(self, apex_bundle, tiny_unet_ckpt):
        dataset, ckpt, _ = apex_bundle
        truth = {s.sample_id: s.label for s in dataset.samples}
        decisions = improve_predictions(dataset.samples, ckpt, tiny_unet_ckpt)
        report = improve_training_set_report(dataset.samples, ckpt, tiny_unet_ckpt)
        before = sum(1 for d in decisions if d.initial_label != truth[d.sample_id])
        after = sum(1 for d in decisions if d.final_label != truth[d.sample_id])
        assert report["task"] == "apex"
        assert report["n_samples"] == len(dataset.samples)
        assert report["misclassified_before"] == before
        assert report["misclassified_after"] == after
        if before == 0:
            assert report["recovery_fraction"] is None
        else:
            assert report["recovery_fraction"] == pytest.approx((before - after) / before)


class TestDecisionIO:
    def test_round_trip(self, tmp_path):
        decisions = [
            _decision(sample_id="a", final_probability=0.61),
            _decision(
                sample_id="b",
                initial_label="P",
                initial_probability=0.93,
                reprediction_applied=False,
                final_probability=0.93,
                final_label="P",
            ),
        ]
        path = save_decisions(decisions, tmp_path / "out" / "decisions.jsonl")
        assert path.read_text().count("\n") == 2
        assert load_decisions(path) == decisions

    def test_byte_deterministic(self, tmp_path):
        decisions = [_decision(sample_id=f"s{i}", final_probability=0.5 + i / 100) for i in range(4)]
        a = save_decisions(decisions, tmp_path / "a.jsonl").read_bytes()
        b = save_decisions(decisions, tmp_path / "b.jsonl").read_bytes()
        assert a == b

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(IOFailure):
            load_decisions(tmp_path / "absent.jsonl")


class TestCorpusPipeline:
    def test_builds_corpus_and_segmenter(self, apex_bundle, tmp_path):
        dataset, ckpt, masks = apex_bundle
        positives = [s for s in dataset.samples if s.label == "P"][:6]
        corpus, unet_ckpt = run_algorithm1(
            dataset,
            ckpt,
            explainer_cfg=ExplainerConfig(num_perturbations=60, seed=0),
            unet_cfg=UNetTrainConfig(epochs=4, batch_size=4, seed=0),
            unet_spec=TINY_UNET_SPEC,
            samples=positives,
            corpus_dir=tmp_path / "corpus",
        )
        assert unet_ckpt.task == "apex-unet"
        assert {p.sample_id for p in corpus} <= {s.sample_id for s in positives}
        assert (tmp_path / "corpus" / corpus[0].sample_id / "mask.raw").exists()
        for p in corpus:
            assert p.mask.dtype == bool
            assert p.mask.any()
