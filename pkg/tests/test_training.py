"""Split protocol and the fold training loop."""

import numpy as np
import pytest

from gatefusenet.augment import AugmentSpec
from gatefusenet.config import NetworkConfig, TrainPlan
from gatefusenet.errors import ConfigError
from gatefusenet.phantoms import PhantomSpec, build_manifest
from gatefusenet.training import (
    VolumeDataset,
    split_dataset,
    train_fold,
)
from gatefusenet.volumeio import SubjectRecord


def fake_records(n_per_class):
    recs = []
    for i in range(2 * n_per_class):
        recs.append(SubjectRecord(id=f"s{i:03d}", label=i % 2, qsm="", t1w="", roi=""))
    return recs


class TestSplit:
    def test_hundred_records_fifty_fifty(self):
        recs = fake_records(50)
        a = split_dataset(recs, seed=0)
        assert len(a.test_ids) == 20
        by_id = {r.id: r.label for r in recs}
        assert sum(by_id[i] for i in a.test_ids) == 10
        for ids in a.folds:
            assert len(ids) == 16
            assert sum(by_id[i] for i in ids) == 8

    def test_same_seed_identical(self):
        recs = fake_records(20)
        a = split_dataset(recs, seed=5)
        b = split_dataset(recs, seed=5)
        assert a.test_ids == b.test_ids
        assert a.folds == b.folds

    def test_different_seed_differs(self):
        recs = fake_records(20)
        a = split_dataset(recs, seed=5)
        b = split_dataset(recs, seed=6)
        assert a.test_ids != b.test_ids or a.folds != b.folds

    def test_partition_property(self):
        recs = fake_records(13)
        a = split_dataset(recs, seed=3)
        groups = [a.test_ids] + a.folds
        union = [i for g in groups for i in g]
        assert sorted(union) == sorted(r.id for r in recs)
        assert len(union) == len(set(union))

    def test_single_class_rejected(self):
        recs = [SubjectRecord(id=f"s{i}", label=1, qsm="", t1w="", roi="") for i in range(12)]
        with pytest.raises(ConfigError, match="class"):
            split_dataset(recs, seed=0)

    def test_too_few_records_rejected(self):
        with pytest.raises(ConfigError, match="10"):
            split_dataset(fake_records(4), seed=0)

    def test_fold_split_helper(self):
        recs = fake_records(20)
        a = split_dataset(recs, seed=1)
        train, val = a.fold_split(2)
        assert set(val) == set(a.folds[2])
        assert set(train) == set(i for f, ids in enumerate(a.folds) if f != 2 for i in ids)
        with pytest.raises(ConfigError):
            a.fold_split(9)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom_ds")
    build_manifest(PhantomSpec(size=16), 12, seed=21, out_dir=str(out))
    return VolumeDataset(str(out))


def tiny_cfg():
    return NetworkConfig(stem_width=4, stage_widths=(8, 8, 8), roi_channels=10,
                         cbam_reduction=4)


class TestTrainFold:
    def test_one_epoch_run_is_best_by_definition(self, tiny_dataset):
        plan = TrainPlan(epochs=1, batch_size=4, seed=0)
        ids = [r.id for r in tiny_dataset.records]
        res = train_fold(tiny_dataset, ids[:8], ids[8:], tiny_cfg(), plan, fold_seed=1)
        assert res.best_epoch == 0
        assert len(res.log) == 1
        assert not res.diverged

    def test_tie_goes_to_earlier_epoch(self, tiny_dataset, monkeypatch):
        """Force identical validation metrics across epochs via a frozen
        scorer; the retained checkpoint must be epoch 0."""
        import gatefusenet.training as training

        fixed = np.array([0.9, 0.1, 0.9, 0.1])

        def frozen_scores(net, dataset, ids, batch_size=4):
            return fixed[: len(ids)]

        monkeypatch.setattr(training, "score_subjects", frozen_scores)
        plan = TrainPlan(epochs=3, batch_size=4, seed=0)
        ids = [r.id for r in tiny_dataset.records]
        res = training.train_fold(tiny_dataset, ids[:8], ids[8:], tiny_cfg(), plan, fold_seed=2)
        assert res.best_epoch == 0
        assert len(res.log) == 3

    def test_log_columns_and_rows(self, tiny_dataset, tmp_path):
        plan = TrainPlan(epochs=2, batch_size=4, seed=0)
        ids = [r.id for r in tiny_dataset.records]
        res = train_fold(tiny_dataset, ids[:8], ids[8:], tiny_cfg(), plan, fold_seed=3)
        path = tmp_path / "log.csv"
        res.write_log(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,lr,train_loss,val_auc,val_f1,val_acc"
        assert len(lines) == 3

    def test_divergence_keeps_last_good_checkpoint(self, tiny_dataset, monkeypatch):
        """Inject a NaN loss in epoch 1; epoch 0's checkpoint survives."""
        import gatefusenet.training as training

        real_focal = training.focal_loss
        calls = {"n": 0}

        def sabotage(logits, labels, params):
            calls["n"] += 1
            if calls["n"] > 2:  # past epoch 0's two batches
                from gatefusenet.tensor import Tensor

                return Tensor(np.array(np.nan))
            return real_focal(logits, labels, params)

        monkeypatch.setattr(training, "focal_loss", sabotage)
        plan = TrainPlan(epochs=4, batch_size=4, seed=0)
        ids = [r.id for r in tiny_dataset.records]
        res = training.train_fold(tiny_dataset, ids[:8], ids[8:], tiny_cfg(), plan, fold_seed=4)
        assert res.diverged
        assert res.best_epoch == 0
        assert len(res.checkpoint) > 0

    def test_determinism_of_checkpoints(self, tiny_dataset):
        plan = TrainPlan(epochs=2, batch_size=4, seed=0)
        ids = [r.id for r in tiny_dataset.records]
        a = train_fold(tiny_dataset, ids[:8], ids[8:], tiny_cfg(), plan, fold_seed=5)
        b = train_fold(tiny_dataset, ids[:8], ids[8:], tiny_cfg(), plan, fold_seed=5)
        assert a.checkpoint == b.checkpoint
        assert [r.__dict__ for r in a.log] == [r.__dict__ for r in b.log]

    def test_augmentation_changes_training_path(self, tiny_dataset):
        ids = [r.id for r in tiny_dataset.records]
        on = TrainPlan(epochs=1, batch_size=4, seed=0, augment=True)
        off = TrainPlan(epochs=1, batch_size=4, seed=0, augment=False)
        aug = AugmentSpec(p_affine=1.0, p_bias=1.0, p_noise=1.0)
        a = train_fold(tiny_dataset, ids[:8], ids[8:], tiny_cfg(), on, fold_seed=6, aug_spec=aug)
        b = train_fold(tiny_dataset, ids[:8], ids[8:], tiny_cfg(), off, fold_seed=6, aug_spec=aug)
        assert a.checkpoint != b.checkpoint


class TestVolumeDataset:
    def test_split_selectors(self, tiny_dataset):
        all_ids = tiny_dataset.ids_for_split("all")
        train_ids = tiny_dataset.ids_for_split("train")
        test_ids = tiny_dataset.ids_for_split("test")
        assert sorted(train_ids + test_ids) == sorted(all_ids)
        with pytest.raises(ConfigError):
            tiny_dataset.ids_for_split("fold99")

    def test_labels_align(self, tiny_dataset):
        ids = tiny_dataset.ids_for_split("all")
        labels = tiny_dataset.labels(ids)
        assert set(labels.tolist()) == {0.0, 1.0}
