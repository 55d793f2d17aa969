import numpy as np
import pytest

from gldpsim.datagen import (
    ClientTimeline,
    DatasetSpec,
    LabeledSet,
    PartitionPlan,
    StageTask,
    apply_longtail,
    export_partitions,
    import_partitions,
    longtail_class_counts,
    make_synthetic_dataset,
    partition_clients,
)
from gldpsim.errors import ConfigError, DataError


def small_spec(**overrides):
    base = dict(
        num_classes=10, input_dim=16, samples_per_class=100,
        class_center_scale=4.0, noise_sigma=0.5, seed=7,
    )
    base.update(overrides)
    return DatasetSpec(**base)


class TestMakeSyntheticDataset:
    def test_row_count_and_grouped_labels(self):
        data = make_synthetic_dataset(
            DatasetSpec(num_classes=2, input_dim=2, samples_per_class=3, seed=7)
        )
        assert len(data) == 6
        assert data.labels.tolist() == [0, 0, 0, 1, 1, 1]

    def test_same_seed_bit_identical(self):
        spec = small_spec()
        a = make_synthetic_dataset(spec)
        b = make_synthetic_dataset(spec)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.ids, b.ids)

    def test_different_seed_differs(self):
        a = make_synthetic_dataset(small_spec(seed=1))
        b = make_synthetic_dataset(small_spec(seed=2))
        assert not np.array_equal(a.inputs, b.inputs)

    def test_nearest_centroid_oracle_accuracy(self):
        # Independent oracle: estimate each class center from half the
        # draws, classify the held-out half by nearest center; the
        # well-separated spec must score above 95%.
        spec = small_spec()
        data = make_synthetic_dataset(spec)
        fit = data.subset(np.arange(len(data)) % 2 == 0)
        held_out = data.subset(np.arange(len(data)) % 2 == 1)
        centers = np.stack(
            [fit.inputs[fit.labels == c].mean(axis=0) for c in range(spec.num_classes)]
        )
        gaps = held_out.inputs[:, None, :] - centers[None, :, :]
        predicted = (gaps**2).sum(axis=-1).argmin(axis=1)
        assert (predicted == held_out.labels).mean() > 0.95

    def test_invalid_fields_name_the_field(self):
        with pytest.raises(ConfigError, match="num_classes"):
            DatasetSpec(num_classes=1, input_dim=4, samples_per_class=5)
        with pytest.raises(ConfigError, match="noise_sigma"):
            DatasetSpec(num_classes=3, input_dim=4, samples_per_class=5, noise_sigma=0.0)
        with pytest.raises(ConfigError, match="seed"):
            DatasetSpec(num_classes=3, input_dim=4, samples_per_class=5, seed=-1)


class TestApplyLongtail:
    def test_identity_when_factor_is_one(self):
        data = make_synthetic_dataset(small_spec())
        thinned = apply_longtail(data, 1.0, seed=0)
        assert all(count == 100 for count in thinned.class_counts().values())

    def test_frozen_count_oracle_if_100(self):
        # Direct evaluation of round(100 * 100^(-k/9)) per class.
        assert longtail_class_counts(100, 100.0, 10) == [100, 60, 36, 22, 13, 8, 5, 3, 2, 1]

    def test_head_and_tail_counts(self):
        data = make_synthetic_dataset(small_spec())
        thinned = apply_longtail(data, 100.0, seed=0)
        counts = thinned.class_counts()
        assert counts[0] == 100
        assert counts[9] == 1
        assert counts[3] == 22

    def test_counts_non_increasing(self):
        data = make_synthetic_dataset(small_spec())
        for factor in (1.0, 10.0, 50.0, 100.0):
            counts = apply_longtail(data, factor, seed=0).class_counts()
            values = [counts[k] for k in range(10)]
            assert values == sorted(values, reverse=True)

    def test_requires_factor_at_least_one(self):
        data = make_synthetic_dataset(small_spec())
        with pytest.raises(ConfigError):
            apply_longtail(data, 0.5, seed=0)

    def test_requires_balanced_input(self):
        data = make_synthetic_dataset(small_spec())
        unbalanced = data.subset(np.arange(len(data) - 5))
        with pytest.raises(DataError):
            apply_longtail(unbalanced, 10.0, seed=0)

    def test_ids_preserved(self):
        data = make_synthetic_dataset(small_spec())
        thinned = apply_longtail(data, 50.0, seed=0)
        assert set(thinned.ids) <= set(data.ids)


def four_class_data(seed=3):
    spec = DatasetSpec(num_classes=4, input_dim=4, samples_per_class=20, seed=seed)
    return make_synthetic_dataset(spec)


class TestPartitionClients:
    def test_single_stage_shape(self):
        timelines = partition_clients(
            four_class_data(),
            PartitionPlan(num_clients=2, classes_per_client=2, num_stages=1, seed=5),
        )
        assert len(timelines) == 2
        for t in timelines:
            assert len(t.stages) == 1
            assert len(t.stages[0].class_set) == 2

    def test_staged_shape_20_4_5(self):
        data = make_synthetic_dataset(small_spec())
        thinned = apply_longtail(data, 50.0, seed=0)
        timelines = partition_clients(
            thinned,
            PartitionPlan(num_clients=20, classes_per_client=4, num_stages=5,
                          imbalance_factor=50.0, seed=0),
        )
        assert len(timelines) == 20
        assert all(len(t.stages) == 5 for t in timelines)

    def test_disjoint_union_covers_dataset(self):
        # Multiset-equality oracle over sample ids: every id lands in
        # exactly one client/stage/split.
        data = four_class_data()
        timelines = partition_clients(
            data, PartitionPlan(num_clients=2, classes_per_client=2, num_stages=1, seed=5)
        )
        collected = []
        for t in timelines:
            for s in t.stages:
                collected.extend(s.train.ids.tolist())
                collected.extend(s.test.ids.tolist())
        assert sorted(collected) == sorted(data.ids.tolist())

    def test_train_test_split_is_80_20_per_class(self):
        data = four_class_data()
        timelines = partition_clients(
            data, PartitionPlan(num_clients=2, classes_per_client=2, num_stages=1, seed=5)
        )
        for t in timelines:
            stage = t.stages[0]
            train_counts = stage.train.class_counts()
            test_counts = stage.test.class_counts()
            for c, n_train in train_counts.items():
                total = n_train + test_counts.get(c, 0)
                assert n_train == max(1, int(np.floor(0.8 * total + 0.5)))

    def test_disjointness_multi_stage(self):
        data = make_synthetic_dataset(small_spec(seed=11))
        thinned = apply_longtail(data, 50.0, seed=11)
        timelines = partition_clients(
            thinned,
            PartitionPlan(num_clients=20, classes_per_client=4, num_stages=5,
                          imbalance_factor=50.0, seed=11),
        )
        seen = set()
        for t in timelines:
            for s in t.stages:
                for sample_id in np.concatenate([s.train.ids, s.test.ids]).tolist():
                    assert sample_id not in seen
                    seen.add(sample_id)

    def test_temporal_heterogeneity_exists(self):
        data = make_synthetic_dataset(small_spec(seed=2))
        for seed in range(5):
            timelines = partition_clients(
                data,
                PartitionPlan(num_clients=20, classes_per_client=4, num_stages=5, seed=seed),
            )
            differs = any(
                t.stages[j].class_set != t.stages[j + 1].class_set
                for t in timelines
                for j in range(len(t.stages) - 1)
            )
            assert differs

    def test_later_stages_introduce_new_classes(self):
        data = make_synthetic_dataset(small_spec(seed=2))
        timelines = partition_clients(
            data, PartitionPlan(num_clients=20, classes_per_client=4, num_stages=5, seed=3)
        )
        introduces = 0
        for t in timelines:
            seen = set(t.stages[0].class_set)
            for s in t.stages[1:]:
                if set(s.class_set) - seen:
                    introduces += 1
                seen |= set(s.class_set)
        assert introduces > 0

    def test_deterministic_in_seed(self):
        data = four_class_data()
        plan = PartitionPlan(num_clients=3, classes_per_client=2, num_stages=2, seed=9)
        a = partition_clients(data, plan)
        b = partition_clients(data, plan)
        for ta, tb in zip(a, b):
            for sa, sb in zip(ta.stages, tb.stages):
                assert np.array_equal(sa.train.ids, sb.train.ids)
                assert np.array_equal(sa.test.ids, sb.test.ids)
                assert sa.class_set == sb.class_set

    def test_labels_subset_of_class_set(self):
        data = make_synthetic_dataset(small_spec(seed=4))
        thinned = apply_longtail(data, 100.0, seed=4)
        timelines = partition_clients(
            thinned,
            PartitionPlan(num_clients=20, classes_per_client=4, num_stages=5,
                          imbalance_factor=100.0, seed=4),
        )
        for t in timelines:
            for s in t.stages:
                for part in (s.train, s.test):
                    assert set(part.labels.tolist()) <= set(s.class_set)

    def test_too_many_classes_per_client_rejected(self):
        with pytest.raises(ConfigError):
            partition_clients(
                four_class_data(),
                PartitionPlan(num_clients=2, classes_per_client=5, num_stages=1),
            )

    def test_impossible_coverage_rejected(self):
        with pytest.raises(ConfigError):
            partition_clients(
                four_class_data(),
                PartitionPlan(num_clients=1, classes_per_client=2, num_stages=1),
            )


class TestExportImport:
    def test_round_trip(self, tmp_path):
        spec = small_spec(seed=6)
        data = make_synthetic_dataset(spec)
        plan = PartitionPlan(num_clients=4, classes_per_client=3, num_stages=2, seed=6)
        timelines = partition_clients(data, plan)
        export_partitions(timelines, tmp_path / "parts", spec, plan)
        loaded, manifest = import_partitions(tmp_path / "parts")
        assert manifest["plan"]["num_clients"] == 4
        assert len(loaded) == len(timelines)
        for original, restored in zip(timelines, loaded):
            assert restored.client_id == original.client_id
            for s_orig, s_rest in zip(original.stages, restored.stages):
                assert s_rest.class_set == s_orig.class_set
                assert np.allclose(s_rest.train.inputs, s_orig.train.inputs)
                assert np.array_equal(s_rest.train.labels, s_orig.train.labels)
                assert np.allclose(s_rest.test.inputs, s_orig.test.inputs)


class TestInvariantGuards:
    def test_labeled_set_shape_mismatch(self):
        with pytest.raises(DataError):
            LabeledSet(np.zeros((3, 2)), np.zeros(2, dtype=np.int64), np.arange(3))

    def test_stage_task_labels_outside_class_set(self):
        bad = LabeledSet(np.zeros((2, 2)), np.array([0, 5]), np.arange(2))
        with pytest.raises(DataError):
            StageTask(stage_index=1, train=bad, test=bad.subset(np.arange(0)), class_set=frozenset({0}))

    def test_test_union_deduplicates_by_id(self):
        inputs = np.arange(8, dtype=np.float64).reshape(4, 2)
        labels = np.array([0, 0, 1, 1])
        ids = np.array([0, 1, 2, 3])
        stage = StageTask(
            stage_index=1,
            train=LabeledSet(inputs[:2], labels[:2], ids[:2]),
            test=LabeledSet(inputs[2:], labels[2:], ids[2:]),
            class_set=frozenset({0, 1}),
        )
        timeline = ClientTimeline(client_id=0, stages=[stage, stage, stage])
        union = timeline.test_union()
        assert len(union) == 2
        assert sorted(union.ids.tolist()) == [2, 3]
