# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Unit tests for synthetic data, episodes, batches and dataset files in src/data.py."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.data import (
    MANIFEST_NAME,
    DomainDataset,
    EpisodeConfig,
    SplitData,
    SyntheticSpec,
    batch_sizes_from_weights,
    check_episode,
    generate_synthetic,
    load_dataset,
    load_datasets,
    load_feature_matrix,
    multi_domain_batches,
    sample_episode,
    save_dataset,
    save_datasets,
    save_feature_matrix,
)
from src.errors import (
    DatasetFormatError,
    DatasetValidationError,
    InfeasibleEpisodeError,
    MissingPayloadError,
    SizeMismatchError,
)
from tests.conftest import TINY_SPEC, make_dataset


class TestGenerateSynthetic:
    """Tests for generate_synthetic()."""

    def test_shapes_and_names(self) -> None:
        """Test domain names, widths and split sizes."""
        datasets = generate_synthetic(TINY_SPEC, seed=1)
        assert [ds.name for ds in datasets] == ["domain0", "domain1"]
        for ds in datasets:
            assert ds.split("train").x.shape == (4 * 8, 6)
            assert ds.num_classes("test") == 5

    def test_deterministic(self) -> None:
        """Test that the same seed gives identical data."""
        a = generate_synthetic(TINY_SPEC, seed=3)
        b = generate_synthetic(TINY_SPEC, seed=3)
        for da, db in zip(a, b, strict=True):
            assert np.array_equal(da.split("train").x, db.split("train").x)

    def test_seeds_differ(self) -> None:
        """Test that another seed gives other data."""
        a = generate_synthetic(TINY_SPEC, seed=3)[0]
        b = generate_synthetic(TINY_SPEC, seed=4)[0]
        assert not np.array_equal(a.split("train").x, b.split("train").x)

    def test_class_disjoint_splits(self) -> None:
        """Test that no class id appears in two splits."""
        ds = generate_synthetic(TINY_SPEC, seed=5)[0]
        seen: set[int] = set()
        for split in ("train", "val", "test"):
            classes = set(ds.split(split).classes)
            assert not classes & seen
            seen |= classes

    def test_unseen_domains_flagged(self) -> None:
        """Test that held-out domains follow the seen ones."""
        spec = SyntheticSpec(num_domains=2, unseen_domains=1, samples_per_class=4, train_classes=3)
        datasets = generate_synthetic(spec, seed=0)
        assert [ds.seen for ds in datasets] == [True, True, False]

    def test_adding_unseen_keeps_seen_domains(self) -> None:
        """Test that extra domains do not perturb existing ones."""
        base = generate_synthetic(TINY_SPEC, seed=2)
        spec = replace(TINY_SPEC, unseen_domains=1)
        extended = generate_synthetic(spec, seed=2)
        assert np.array_equal(base[1].split("test").x, extended[1].split("test").x)

    def test_invalid_spec(self) -> None:
        """Test that impossible specs are refused."""
        with pytest.raises(ValueError):
            SyntheticSpec(latent_dim=8, input_dim=4)


class TestValidation:
    """Tests for dataset validation."""

    def test_overlapping_classes(self) -> None:
        """Test that a class in two splits names the split."""
        x = np.zeros((4, 2))
        y = np.array([0, 0, 1, 1])
        splits = {"train": SplitData(x, y), "val": SplitData(x, y + 2), "test": SplitData(x, y)}
        with pytest.raises(DatasetValidationError) as info:
            DomainDataset("bad", 2, splits)
        assert info.value.split == "test"

    def test_singleton_test_class(self) -> None:
        """Test that test classes need two samples."""
        splits = {
            "train": SplitData(np.zeros((2, 2)), np.array([0, 0])),
            "val": SplitData(np.zeros((2, 2)), np.array([1, 1])),
            "test": SplitData(np.zeros((3, 2)), np.array([2, 2, 3])),
        }
        with pytest.raises(DatasetValidationError):
            DomainDataset("bad", 2, splits)


class TestSampleEpisode:
    """Tests for sample_episode() across regimes."""

    def test_varying_invariants(self, toy_dataset: DomainDataset) -> None:
        """Test that varying episodes satisfy every invariant."""
        rng = np.random.default_rng(0)
        for _ in range(30):
            episode = sample_episode(toy_dataset, "varying", rng)
            check_episode(episode)
            assert 2 <= episode.way <= 4

    def test_query_cap(self) -> None:
        """Test that queries per class respect the cap."""
        ds = make_dataset(classes=(2, 2, 3), per_class=30)
        episode = sample_episode(ds, "varying", np.random.default_rng(1), config=EpisodeConfig(query_cap=4))
        assert np.all(np.bincount(episode.query_y) <= 4)

    def test_five_way_one_shot(self) -> None:
        """Test the fixed 5-way 1-shot layout."""
        ds = make_dataset(classes=(2, 2, 6), per_class=5)
        episode = sample_episode(ds, "5way1shot", np.random.default_rng(2))
        check_episode(episode)
        assert episode.way == 5
        assert len(episode.support_y) == 5

    def test_five_way_needs_five_classes(self, toy_dataset: DomainDataset) -> None:
        """Test that four test classes cannot host 5-way episodes."""
        with pytest.raises(InfeasibleEpisodeError):
            sample_episode(toy_dataset, "5way1shot", np.random.default_rng(0))

    def test_vw5shot(self) -> None:
        """Test five support samples per class."""
        ds = make_dataset(classes=(2, 2, 4), per_class=8)
        episode = sample_episode(ds, "vw5shot", np.random.default_rng(3))
        check_episode(episode)
        assert np.all(np.bincount(episode.support_y) == 5)

    def test_vw5shot_infeasible_with_few_samples(self) -> None:
        """Test that six samples per class are needed."""
        ds = make_dataset(classes=(2, 2, 4), per_class=5)
        with pytest.raises(InfeasibleEpisodeError):
            sample_episode(ds, "vw5shot", np.random.default_rng(0))

    @pytest.mark.parametrize("regime", ["varying", "vw5shot", "5way1shot"])
    def test_thousand_episodes_per_regime(self, regime: str) -> None:
        """Test every invariant on 1000 consecutive episodes of one regime."""
        ds = make_dataset(classes=(2, 2, 8), per_class=12, seed=4)
        rng = np.random.default_rng(11)
        for _ in range(1000):
            episode = sample_episode(ds, regime, rng)  # type: ignore[arg-type]
            check_episode(episode)
            assert set(episode.class_ids) <= set(ds.split("test").classes)
            if regime == "5way1shot":
                assert episode.way == 5
                assert len(episode.support_y) == 5
            elif regime == "vw5shot":
                assert np.all(np.bincount(episode.support_y) == 5)

    def test_reproducible(self, toy_dataset: DomainDataset) -> None:
        """Test that equal generators give equal episodes."""
        a = sample_episode(toy_dataset, "varying", np.random.default_rng(9))
        b = sample_episode(toy_dataset, "varying", np.random.default_rng(9))
        assert np.array_equal(a.support_index, b.support_index)
        assert np.array_equal(a.query_index, b.query_index)

    def test_val_split(self, toy_dataset: DomainDataset) -> None:
        """Test sampling from another split."""
        episode = sample_episode(toy_dataset, "varying", np.random.default_rng(0), split="val")
        assert set(episode.class_ids) <= set(toy_dataset.split("val").classes)

    def test_check_episode_detects_overlap(self, toy_dataset: DomainDataset) -> None:
        """Test that an overlapping support and query are caught."""
        episode = sample_episode(toy_dataset, "varying", np.random.default_rng(0))
        episode.query_index = episode.support_index.copy()
        with pytest.raises(InfeasibleEpisodeError):
            check_episode(episode)


class TestBatches:
    """Tests for batch_sizes_from_weights() and multi_domain_batches()."""

    def test_batch_sizes(self) -> None:
        """Test weight × base sizes."""
        assert batch_sizes_from_weights(["a", "b"], [2, 1], 8) == {"a": 16, "b": 8}
        assert batch_sizes_from_weights(["a", "b"], None, 4) == {"a": 4, "b": 4}

    def test_weight_count_mismatch(self) -> None:
        """Test that weights must match the domains."""
        with pytest.raises(ValueError):
            batch_sizes_from_weights(["a"], [1, 2], 4)

    def test_epoch_covers_every_sample(self, toy_dataset: DomainDataset) -> None:
        """Test sampling without replacement within an epoch."""
        n = len(toy_dataset.split("train"))
        stream = multi_domain_batches([toy_dataset], {"toy": n // 2}, np.random.default_rng(0))
        xs = np.concatenate([next(stream)["toy"][0] for _ in range(2)])
        rows = {tuple(row) for row in xs}
        assert len(rows) == n

    def test_labels_remapped(self, toy_dataset: DomainDataset) -> None:
        """Test that labels run 0..C-1."""
        stream = multi_domain_batches([toy_dataset], {"toy": 18}, np.random.default_rng(0))
        _, y = next(stream)["toy"]
        assert set(y.tolist()) == {0, 1, 2}

    def test_one_batch_per_domain(self) -> None:
        """Test that every step carries every domain."""
        a = make_dataset("a", seed=1)
        b = make_dataset("b", seed=2)
        step = next(multi_domain_batches([a, b], {"a": 4, "b": 6}, np.random.default_rng(0)))
        assert step["a"][0].shape == (4, 4)
        assert step["b"][0].shape == (6, 4)

    def test_non_positive_batch(self, toy_dataset: DomainDataset) -> None:
        """Test that a zero batch size is refused."""
        with pytest.raises(ValueError):
            next(multi_domain_batches([toy_dataset], {"toy": 0}, np.random.default_rng(0)))

    def test_empty_split_is_a_data_error(self) -> None:
        """Test that an empty training split names the split."""
        ds = make_dataset()
        ds.splits["train"] = SplitData(x=np.zeros((0, 4)), y=np.zeros(0, dtype=np.int64))
        with pytest.raises(DatasetValidationError) as info:
            next(multi_domain_batches([ds], {"toy": 4}, np.random.default_rng(0)))
        assert info.value.split == "train"

    def test_sample_frequencies_over_many_steps(self) -> None:
        """Test that 10k steps draw every sample at its expected rate, per domain weight."""
        a = make_dataset("a", seed=1)
        b = make_dataset("b", seed=2)
        sizes = batch_sizes_from_weights(["a", "b"], [1, 2], 4)
        steps = 10_000
        batches = multi_domain_batches([a, b], sizes, np.random.default_rng(5))
        counts: dict[str, dict[tuple[float, ...], int]] = {"a": {}, "b": {}}
        for _ in range(steps):
            for name, (x, _) in next(batches).items():
                for row in map(tuple, x):
                    counts[name][row] = counts[name].get(row, 0) + 1
        for ds in (a, b):
            n = len(ds.split("train"))
            total = steps * sizes[ds.name]
            expected = total / n
            sigma = np.sqrt(total * (1 / n) * (1 - 1 / n))
            observed = np.array(list(counts[ds.name].values()))
            assert len(observed) == n
            assert np.all(np.abs(observed - expected) <= 3 * sigma)
            assert observed.max() - observed.min() <= 1


class TestDatasetFiles:
    """Tests for dataset directories."""

    def test_roundtrip(self, tmp_path: Path, toy_dataset: DomainDataset) -> None:
        """Test save then load."""
        loaded = load_dataset(save_dataset(toy_dataset, tmp_path / "toy"))
        assert loaded.name == "toy"
        for split in ("train", "val", "test"):
            assert np.array_equal(loaded.split(split).x, toy_dataset.split(split).x)
            assert np.array_equal(loaded.split(split).y, toy_dataset.split(split).y)

    def test_manifest_contents(self, tmp_path: Path, toy_dataset: DomainDataset) -> None:
        """Test manifest fields."""
        save_dataset(toy_dataset, tmp_path / "toy")
        manifest = json.loads((tmp_path / "toy" / MANIFEST_NAME).read_text())
        assert manifest["format_version"] == 1
        assert manifest["splits"]["test"]["num_samples"] == 24

    def test_missing_payload(self, tmp_path: Path, toy_dataset: DomainDataset) -> None:
        """Test that a deleted payload is reported."""
        directory = save_dataset(toy_dataset, tmp_path / "toy")
        (directory / "val_x.f64").unlink()
        with pytest.raises(MissingPayloadError):
            load_dataset(directory)

    def test_size_mismatch(self, tmp_path: Path, toy_dataset: DomainDataset) -> None:
        """Test that a short payload is reported."""
        directory = save_dataset(toy_dataset, tmp_path / "toy")
        path = directory / "train_y.i32"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(SizeMismatchError):
            load_dataset(directory)

    def test_unsupported_version(self, tmp_path: Path, toy_dataset: DomainDataset) -> None:
        """Test that another format version is refused."""
        directory = save_dataset(toy_dataset, tmp_path / "toy")
        manifest_path = directory / MANIFEST_NAME
        manifest = json.loads(manifest_path.read_text())
        manifest["format_version"] = 2
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(DatasetFormatError):
            load_dataset(directory)

    def test_count_mismatch_names_split(self, tmp_path: Path, toy_dataset: DomainDataset) -> None:
        """Test that manifest counts are checked against labels."""
        directory = save_dataset(toy_dataset, tmp_path / "toy")
        manifest_path = directory / MANIFEST_NAME
        manifest = json.loads(manifest_path.read_text())
        manifest["splits"]["val"]["counts"][0] += 1
        manifest["splits"]["val"]["counts"][1] -= 1
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(DatasetValidationError) as info:
            load_dataset(directory)
        assert info.value.split == "val"

    @pytest.mark.parametrize("field, value", [("domain", 7), ("domain", None), ("splits", ["train", "val", "test"])])
    def test_mistyped_manifest_fields(
        self, tmp_path: Path, toy_dataset: DomainDataset, field: str, value: object
    ) -> None:
        """Test that a non-string domain or a non-object splits entry is a format error."""
        directory = save_dataset(toy_dataset, tmp_path / "toy")
        manifest_path = directory / MANIFEST_NAME
        manifest = json.loads(manifest_path.read_text())
        manifest[field] = value
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(DatasetFormatError):
            load_dataset(directory)

    def test_load_datasets_sorted(self, tmp_path: Path) -> None:
        """Test loading every dataset under a root."""
        save_datasets([make_dataset("b", seed=1), make_dataset("a", seed=2)], tmp_path)
        assert [ds.name for ds in load_datasets(tmp_path)] == ["a", "b"]
        with pytest.raises(DatasetFormatError):
            load_datasets(tmp_path, ["c"])

    def test_empty_root(self, tmp_path: Path) -> None:
        """Test that a root without datasets is refused."""
        with pytest.raises(DatasetFormatError):
            load_datasets(tmp_path)


class TestFeatureMatrix:
    """Tests for feature-matrix files."""

    def test_roundtrip(self, tmp_path: Path) -> None:
        """Test save then load."""
        feats = np.random.default_rng(0).normal(size=(5, 3))
        assert np.array_equal(load_feature_matrix(save_feature_matrix(feats, tmp_path / "f.bin")), feats)

    def test_header_format(self, tmp_path: Path) -> None:
        """Test the text header line."""
        path = save_feature_matrix(np.zeros((2, 3)), tmp_path / "f.bin")
        assert path.read_bytes().startswith(b"2 3\n")

    def test_size_mismatch(self, tmp_path: Path) -> None:
        """Test that a payload shorter than the header is refused."""
        path = tmp_path / "f.bin"
        path.write_bytes(b"2 2\n" + bytes(8))
        with pytest.raises(SizeMismatchError):
            load_feature_matrix(path)

    def test_bad_header(self, tmp_path: Path) -> None:
        """Test that a malformed header is refused."""
        path = tmp_path / "f.bin"
        path.write_bytes(b"x y\n")
        with pytest.raises(DatasetFormatError):
            load_feature_matrix(path)
