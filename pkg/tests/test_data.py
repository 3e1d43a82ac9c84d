import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsgmn.data import (
    SyntheticConfig,
    ZslDataset,
    balanced_batch_sampler,
    generate_synthetic_dataset,
    load_dataset,
    standardize_prototypes,
    write_dataset,
)
from vsgmn.errors import ConfigError, IngestionError, ParseError, ValidationError


def _write_raw(path, features, labels, prototypes, split):
    path.mkdir(parents=True, exist_ok=True)
    np.savetxt(path / "features.csv", np.atleast_2d(features), delimiter=",")
    np.savetxt(path / "labels.csv", np.asarray(labels).reshape(-1, 1), fmt="%d")
    np.savetxt(path / "prototypes.csv", np.atleast_2d(prototypes), delimiter=",")
    (path / "split.json").write_text(json.dumps(split))
    return path


class TestLoadDataset:
    def test_round_trip_is_bit_exact(self, small_dataset, tmp_path):
        ds = load_dataset(write_dataset(small_dataset, tmp_path / "ds"))
        for name in ("features", "labels", "prototypes", "seen_classes", "unseen_classes",
                     "train_instances", "test_instances"):
            assert getattr(ds, name).tobytes() == getattr(small_dataset, name).tobytes()

    def test_cub_shaped_split(self, tmp_path):
        rng = np.random.default_rng(0)
        labels = np.arange(200)
        split = {
            "seen_classes": list(range(150)), "unseen_classes": list(range(150, 200)),
            "train_instances": list(range(150)), "test_instances": list(range(150, 200)),
        }
        ds = load_dataset(_write_raw(tmp_path, rng.standard_normal((200, 4)), labels,
                                     rng.standard_normal((200, 3)), split))
        assert (ds.n_classes, len(ds.seen_classes), len(ds.unseen_classes)) == (200, 150, 50)

    def test_minimal_dataset(self, tmp_path):
        split = {"seen_classes": [0], "unseen_classes": [], "train_instances": [0], "test_instances": []}
        ds = load_dataset(_write_raw(tmp_path, [[1.0, 2.0]], [0], [[0.5, 0.5, 0.5]], split))
        assert ds.prototypes.shape == (1, 3)
        assert ds.n_samples == 1

    def test_train_instance_with_unseen_label(self, tmp_path):
        split = {"seen_classes": [0], "unseen_classes": [1], "train_instances": [0, 1], "test_instances": []}
        path = _write_raw(tmp_path, np.eye(2), [0, 1], np.eye(2), split)
        with pytest.raises(ValidationError) as info:
            load_dataset(path)
        assert 1 in info.value.rows

    def test_ragged_row_reports_line(self, small_dataset, tmp_path):
        path = write_dataset(small_dataset, tmp_path / "ds")
        lines = (path / "features.csv").read_text().splitlines()
        lines[3] = ",".join(lines[3].split(",")[:-1])
        (path / "features.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as info:
            load_dataset(path)
        assert info.value.line == 4

    def test_missing_file(self, small_dataset, tmp_path):
        path = write_dataset(small_dataset, tmp_path / "ds")
        (path / "prototypes.csv").unlink()
        with pytest.raises(IngestionError):
            load_dataset(path)

    def test_overlapping_class_sets(self):
        with pytest.raises(ValidationError):
            ZslDataset(np.eye(2), [0, 1], np.eye(2), [0, 1], [1], [0], [1]).validate()

    def test_arrays_are_read_only(self, small_dataset):
        with pytest.raises(ValueError):
            small_dataset.features[0, 0] = 1.0


class TestSynthetic:
    def test_default_size(self, synthetic):
        assert synthetic.features.shape == (600, 32)
        assert synthetic.prototypes.shape == (20, 12)

    def test_unit_sphere_prototypes(self, synthetic):
        np.testing.assert_allclose(np.linalg.norm(synthetic.prototypes, axis=1), 1.0, atol=1e-12)

    def test_zero_noise_collapses_classes(self):
        ds = generate_synthetic_dataset(noise_scale=0.0, samples_per_class=4)
        for c in range(ds.n_classes):
            rows = ds.features[ds.labels == c]
            np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))

    def test_deterministic(self):
        a, b = generate_synthetic_dataset(seed=11), generate_synthetic_dataset(seed=11)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.test_instances.tobytes() == b.test_instances.tobytes()

    @pytest.mark.parametrize("override", [dict(n_seen=1), dict(n_unseen=0), dict(attr_dim=1)])
    def test_invalid_counts(self, override):
        with pytest.raises(ConfigError):
            generate_synthetic_dataset(SyntheticConfig(**override))


def _sized_dataset(sizes):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    return ZslDataset(
        features=np.arange(n, dtype=float).reshape(n, 1), labels=labels,
        prototypes=np.eye(len(sizes) + 1), seen_classes=np.arange(len(sizes)),
        unseen_classes=[len(sizes)], train_instances=np.arange(n), test_instances=[],
    ).validate()


class TestSampler:
    def test_full_width_batches_cover_every_class(self):
        ds = _sized_dataset([4, 4, 4])
        for batch in balanced_batch_sampler(ds, 3, seed=0).epoch():
            assert sorted(ds.labels[batch]) == [0, 1, 2]

    def test_sizes_three_one_two(self):
        ds = _sized_dataset([3, 1, 2])
        batches = balanced_batch_sampler(ds, 3, seed=0).epoch()
        assert len(batches) >= 3
        assert sorted(np.concatenate(batches)) == list(range(6))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=2, max_size=6), st.integers(0, 10_000), st.data())
    def test_epoch_contract(self, sizes, seed, data):
        ds = _sized_dataset(sizes)
        n_b = data.draw(st.integers(1, len(sizes)))
        batches = balanced_batch_sampler(ds, n_b, seed=seed).epoch()
        for b in batches:
            assert 1 <= len(b) <= n_b
            assert len(set(ds.labels[b].tolist())) == len(b)
        assert sorted(np.concatenate(batches).tolist()) == list(range(sum(sizes)))

    def test_deterministic_per_seed(self, small_dataset):
        a = balanced_batch_sampler(small_dataset, 4, seed=3).epoch()
        b = balanced_batch_sampler(small_dataset, 4, seed=3).epoch()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_batch_larger_than_seen_set(self, small_dataset):
        with pytest.raises(ConfigError):
            balanced_batch_sampler(small_dataset, 6)


class TestStandardize:
    def test_two_values(self):
        s = standardize_prototypes(np.array([[1.0], [3.0]]), seen_classes=[0, 1])
        np.testing.assert_allclose(s.standardized[:, 0], [-1.0, 1.0])

    def test_constant_column(self):
        raw = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        np.testing.assert_array_equal(standardize_prototypes(raw).standardized[:, 1], 0.0)

    def test_fixed_point(self):
        seen = np.array([[1.0, -1.0], [-1.0, 1.0]])
        raw = np.vstack([seen, [[4.0, 7.0]]])
        s = standardize_prototypes(raw, seen_classes=[0, 1])
        np.testing.assert_allclose(s.standardized[:2], seen, atol=1e-15)

    def test_statistics_come_from_seen_rows(self, rng):
        raw = rng.standard_normal((10, 4)) * 3 + 1
        s = standardize_prototypes(raw, seen_classes=np.arange(7))
        np.testing.assert_allclose(s.standardized[:7].mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(s.standardized[:7].var(axis=0), 1.0, atol=1e-6)

    def test_normalized_rows(self, rng):
        s = standardize_prototypes(rng.standard_normal((6, 3)))
        np.testing.assert_allclose(np.linalg.norm(s.normalized, axis=1), 1.0, atol=1e-12)
