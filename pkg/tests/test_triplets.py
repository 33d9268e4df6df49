"""Triplet carving indices, fold grouping, and manifest round-trips."""

import numpy as np
import pytest

from coverqc.dataprep.phantom import generate_phantom
from coverqc.dataprep.triplets import (
    TaskDataset,
    TripletSample,
    extract_triplets,
    load_dataset,
    make_folds,
    manifest_sha256,
    save_dataset,
)
from coverqc.dataprep.volumes import VolumeStack
from coverqc.errors import IOFailure, ShapeMismatch, TooFewVolumes, UnreadableFile


def _volume(n, h=32, w=32, seed=0):
    rng = np.random.default_rng([seed, n])
    return VolumeStack(f"vol{seed}n{n}", rng.random((n, h, w)).astype(np.float32))


class TestExtraction:
    @pytest.mark.parametrize("n", [8, 9, 10])
    def test_boundary_window_indices(self, n):
        ap, an, bp, bn = extract_triplets(_volume(n), target_size=32)
        assert ap.slice_indices == (1, 2, 3)
        assert an.slice_indices == (2, 3, 4)
        assert bp.slice_indices == (n - 2, n - 1, n)
        assert bn.slice_indices == (n - 3, n - 2, n - 1)

    def test_labels_tasks_and_ids(self):
        v = _volume(9)
        ap, an, bp, bn = extract_triplets(v, target_size=32)
        assert (ap.task, ap.label) == ("apex", "P")
        assert (an.task, an.label) == ("apex", "N")
        assert (bp.task, bp.label) == ("basal", "P")
        assert (bn.task, bn.label) == ("basal", "N")
        assert ap.sample_id == f"{v.volume_id}--apex-P"
        assert {s.source_volume_id for s in (ap, an, bp, bn)} == {v.volume_id}
        assert ap.y == 1 and an.y == 0

    def test_stacks_copy_the_right_slices(self):
        v = _volume(10)
        ap, an, bp, bn = extract_triplets(v, target_size=32)
        for s in (ap, an, bp, bn):
            for row, idx in enumerate(s.slice_indices):
                np.testing.assert_array_equal(s.stack[row], v.slices[idx - 1])

    def test_rectangular_volume_center_cropped_then_resized(self):
        rng = np.random.default_rng(1)
        v = VolumeStack("rect", rng.random((8, 40, 64)).astype(np.float32))
        ap = extract_triplets(v, target_size=32)[0]
        assert ap.stack.shape == (3, 32, 32)
        assert ap.stack.min() >= 0.0 and ap.stack.max() <= 1.0
        # the crop keeps the middle 40x40 window before resampling
        crop = v.slices[0][:, 12:52]
        direct = extract_triplets(
            VolumeStack("sq", np.repeat(crop[None], 8, axis=0)), target_size=32
        )[0]
        np.testing.assert_array_equal(ap.stack[0], direct.stack[0])

    def test_phantom_volume_extraction(self):
        v = generate_phantom(12, 8)
        samples = extract_triplets(v, target_size=128)
        assert [s.task for s in samples] == ["apex", "apex", "basal", "basal"]
        assert all(s.stack.shape == (3, 128, 128) for s in samples)


class TestSampleValidation:
    def test_non_consecutive_indices(self):
        with pytest.raises(ValueError):
            TripletSample(np.zeros((3, 8, 8), np.float32), "P", "apex", "v", (1, 3, 5))

    def test_bad_label_and_task(self):
        with pytest.raises(ValueError):
            TripletSample(np.zeros((3, 8, 8), np.float32), "X", "apex", "v", (1, 2, 3))
        with pytest.raises(ValueError):
            TripletSample(np.zeros((3, 8, 8), np.float32), "P", "mid", "v", (1, 2, 3))

    def test_bad_stack_shapes(self):
        with pytest.raises(ShapeMismatch):
            TripletSample(np.zeros((4, 8, 8), np.float32), "P", "apex", "v", (1, 2, 3))
        with pytest.raises(ShapeMismatch):
            TripletSample(np.zeros((3, 8, 9), np.float32), "P", "apex", "v", (1, 2, 3))

    def test_non_finite_stack(self):
        bad = np.full((3, 8, 8), np.inf, np.float32)
        with pytest.raises(ShapeMismatch):
            TripletSample(bad, "P", "apex", "v", (1, 2, 3))


def _task_samples(n_volumes, task="apex", size=16):
    samples = []
    for i in range(n_volumes):
        v = _volume(8, size, size, seed=i)
        for s in extract_triplets(v, target_size=size):
            if s.task == task:
                samples.append(s)
    return samples


class TestFolds:
    def test_siblings_share_a_fold(self):
        ds = make_folds(_task_samples(11), 3, seed=4)
        by_volume = {}
        for s in ds.samples:
            by_volume.setdefault(s.source_volume_id, set()).add(ds.fold_of(s))
        assert all(len(folds) == 1 for folds in by_volume.values())

    def test_fold_sizes_balanced_in_volumes(self):
        ds = make_folds(_task_samples(11), 3, seed=4)
        per_fold = [
            len({s.source_volume_id for s in ds.test_samples(f)}) for f in range(ds.k)
        ]
        assert sum(per_fold) == 11
        assert max(per_fold) - min(per_fold) <= 1

    def test_train_test_partition(self):
        ds = make_folds(_task_samples(9), 3, seed=0)
        for f in range(ds.k):
            train = {s.sample_id for s in ds.train_samples(f)}
            test = {s.sample_id for s in ds.test_samples(f)}
            assert not train & test
            assert train | test == {s.sample_id for s in ds.samples}

    def test_deterministic_for_seed(self):
        samples = _task_samples(8)
        a = make_folds(samples, 4, seed=9).fold_assignment
        b = make_folds(samples, 4, seed=9).fold_assignment
        assert a == b
        c = make_folds(samples, 4, seed=10).fold_assignment
        assert a != c

    def test_k_below_two(self):
        with pytest.raises(ValueError):
            make_folds(_task_samples(4), 1, seed=0)

    def test_too_few_volumes(self):
        with pytest.raises(TooFewVolumes):
            make_folds(_task_samples(3), 5, seed=0)
        with pytest.raises(TooFewVolumes):
            make_folds([], 2, seed=0)

    def test_mixed_tasks_rejected(self):
        mixed = _task_samples(4, "apex") + _task_samples(4, "basal")
        with pytest.raises(ValueError):
            make_folds(mixed, 2, seed=0)

    def test_dataset_rejects_partial_fold_assignment(self):
        samples = _task_samples(4)
        with pytest.raises(ValueError):
            TaskDataset(task="apex", samples=samples, fold_assignment={samples[0].sample_id: 0})


class TestManifest:
    def _datasets(self, n_volumes=5, size=16):
        by_task = {"apex": [], "basal": []}
        for i in range(n_volumes):
            for s in extract_triplets(_volume(8, size, size, seed=i), target_size=size):
                by_task[s.task].append(s)
        return [make_folds(by_task[t], 2, seed=1) for t in ("apex", "basal")]

    def test_round_trip_preserves_everything(self, tmp_path):
        datasets = self._datasets()
        manifest = save_dataset(datasets, tmp_path)
        for ds in datasets:
            loaded = load_dataset(manifest, ds.task)
            assert loaded.task == ds.task
            assert loaded.fold_assignment == ds.fold_assignment
            by_id = {s.sample_id: s for s in loaded.samples}
            assert set(by_id) == {s.sample_id for s in ds.samples}
            for s in ds.samples:
                twin = by_id[s.sample_id]
                np.testing.assert_array_equal(twin.stack, s.stack)
                assert twin.slice_indices == s.slice_indices
                assert twin.label == s.label

    def test_manifest_bytes_independent_of_dataset_order(self, tmp_path):
        datasets = self._datasets()
        m1 = save_dataset(datasets, tmp_path / "a")
        m2 = save_dataset(datasets[::-1], tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()
        assert manifest_sha256(m1) == manifest_sha256(m2)

    def test_sha_tracks_content(self, tmp_path):
        m = save_dataset(self._datasets(), tmp_path)
        before = manifest_sha256(m)
        m.write_text(m.read_text().replace("apex", "apex", 1))  # no-op rewrite
        assert manifest_sha256(m) == before
        m.write_text(m.read_text()[1:])
        assert manifest_sha256(m) != before

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IOFailure):
            load_dataset(tmp_path / "nope.jsonl", "apex")

    def test_bad_task_argument(self, tmp_path):
        m = save_dataset(self._datasets(2), tmp_path)
        with pytest.raises(ValueError):
            load_dataset(m, "middle")

    def test_corrupt_tensor_detected(self, tmp_path):
        m = save_dataset(self._datasets(2), tmp_path)
        victim = next((tmp_path / "tensors").glob("*apex*.raw"))
        victim.write_bytes(victim.read_bytes()[:-4])
        with pytest.raises(UnreadableFile):
            load_dataset(m, "apex")
