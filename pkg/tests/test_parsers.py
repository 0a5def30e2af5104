"""Tests for parsers module."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from attr_ops.errors import DatasetError
from attr_ops.models import DatasetBundle, GroundTruth, PairId, SyntheticSpec, Vocab
from attr_ops.parsers import (
    load_dataset,
    load_dataset_dir,
    read_antonyms,
    read_object_vectors,
    read_pairs,
    read_pool,
    save_dataset,
    write_pairs,
    write_pool,
)
from attr_ops.synthetic import generate_synthetic


def assert_bundles_equal(a: DatasetBundle, b: DatasetBundle) -> None:
    assert a.vocab == b.vocab
    assert a.feat_dim == b.feat_dim
    assert a.seen_pairs == b.seen_pairs
    assert a.unseen_pairs == b.unseen_pairs
    for split in ("train", "test"):
        left, right = getattr(a, split), getattr(b, split)
        assert left.image_ids == right.image_ids
        npt.assert_array_equal(left.features, right.features)
        npt.assert_array_equal(left.attrs, right.attrs)
        npt.assert_array_equal(left.objs, right.objs)
    assert a.antonyms == b.antonyms
    assert (a.object_vectors is None) == (b.object_vectors is None)
    if a.object_vectors is not None and b.object_vectors is not None:
        assert list(a.object_vectors) == list(b.object_vectors)
        for name, vec in a.object_vectors.items():
            npt.assert_array_equal(vec, b.object_vectors[name])


class TestLoadDataset:
    """Test load_dataset and load_dataset_dir."""

    def test_minimal_fixture(self, minimal_dataset: Path):
        bundle = load_dataset_dir(minimal_dataset)
        assert bundle.vocab.attributes == ("old", "new")
        assert bundle.vocab.objects == ("car", "house")
        assert len(bundle.seen_pairs) == 3
        assert bundle.unseen_pairs == [PairId(1, 1)]
        assert len(bundle.train) == 3
        assert bundle.test.image_ids == ["img3"]
        assert bundle.feat_dim == 3

    def test_single_file_is_split_by_pair_status(self, minimal_dataset: Path):
        combined = minimal_dataset / "all.txt"
        train = (minimal_dataset / "train_features.txt").read_text().splitlines()
        test = (minimal_dataset / "test_features.txt").read_text().splitlines()
        combined.write_text("\n".join(["4 3", *train[1:], *test[1:]]) + "\n")
        bundle = load_dataset(combined, minimal_dataset / "pairs.txt")
        assert len(bundle.train) == 3
        assert bundle.test.image_ids == ["img3"]

    def test_train_instance_with_unseen_pair(self, minimal_dataset: Path):
        path = minimal_dataset / "train_features.txt"
        lines = path.read_text().splitlines()
        lines[2] = "img1 new house 0.0 1.0 0.0"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match=r"train_features.txt:3:.*not a seen pair"):
            load_dataset_dir(minimal_dataset)

    def test_attribute_only_in_unseen_pairs(self, minimal_dataset: Path):
        (minimal_dataset / "pairs.txt").write_text(
            "old car seen\nold house seen\nnew car seen\nripe house unseen\n"
        )
        (minimal_dataset / "test_features.txt").write_text("1 3\nimg3 ripe house 0 0 1\n")
        with pytest.raises(DatasetError, match="'ripe' appears in no seen pair"):
            load_dataset_dir(minimal_dataset)

    def test_unknown_name(self, minimal_dataset: Path):
        (minimal_dataset / "test_features.txt").write_text("1 3\nimg3 new boat 0 0 1\n")
        match = r"test_features.txt:2: unknown object 'boat'"
        with pytest.raises(DatasetError, match=match):
            load_dataset_dir(minimal_dataset)

    def test_count_mismatch(self, minimal_dataset: Path):
        (minimal_dataset / "test_features.txt").write_text("2 3\nimg3 new house 0 0 1\n")
        with pytest.raises(DatasetError, match="declares 2"):
            load_dataset_dir(minimal_dataset)

    def test_non_finite_value(self, minimal_dataset: Path):
        test_file = minimal_dataset / "test_features.txt"
        test_file.write_text("1 3\nimg3 new house 0 nan 1\n")
        with pytest.raises(DatasetError, match="non-finite"):
            load_dataset_dir(minimal_dataset)

    def test_optional_files(self, minimal_dataset: Path):
        (minimal_dataset / "antonyms.txt").write_text("old new\n")
        (minimal_dataset / "object_vectors.txt").write_text("car 1 0\nhouse 0 1\n")
        bundle = load_dataset_dir(minimal_dataset)
        assert bundle.antonyms is not None and bundle.antonyms.pairs == ((0, 1),)
        assert bundle.object_vectors is not None
        npt.assert_array_equal(bundle.object_vectors["house"], [0.0, 1.0])

    def test_missing_directory(self, tmp_path: Path):
        with pytest.raises(DatasetError, match="not found"):
            load_dataset_dir(tmp_path / "nope")


class TestPairsFile:
    """Test read_pairs and write_pairs."""

    def test_comments_and_blank_lines(self, tmp_path: Path):
        path = tmp_path / "pairs.txt"
        path.write_text("# header\n\nwet dog seen\n  dry dog unseen  \n")
        vocab, seen, unseen = read_pairs(path)
        assert vocab.attributes == ("wet", "dry")
        assert seen == [PairId(0, 0)] and unseen == [PairId(1, 0)]

    def test_bad_status(self, tmp_path: Path):
        path = tmp_path / "pairs.txt"
        path.write_text("wet dog seen\nwet cat maybe\n")
        with pytest.raises(DatasetError, match=r"pairs.txt:2: status"):
            read_pairs(path)

    def test_duplicate_pair(self, tmp_path: Path):
        path = tmp_path / "pairs.txt"
        path.write_text("wet dog seen\nwet dog unseen\n")
        with pytest.raises(DatasetError, match="listed twice"):
            read_pairs(path)

    def test_pinned_order_round_trip(self, tmp_path: Path):
        vocab = Vocab(("a", "b"), ("x", "y"))
        seen = [PairId(1, 1), PairId(0, 0), PairId(1, 0)]
        unseen = [PairId(0, 1)]
        path = tmp_path / "pairs.txt"
        write_pairs(path, vocab, seen, unseen)
        assert path.read_text().startswith("#attributes: a b\n#objects: x y\n")
        assert read_pairs(path) == (vocab, seen, unseen)


class TestSmallFiles:
    """Test antonym, vector and pool files."""

    def test_antonyms_unknown_name(self, tmp_path: Path, tiny_vocab: Vocab):
        path = tmp_path / "antonyms.txt"
        path.write_text("old new\nold ripe\n")
        match = r"antonyms.txt:2: unknown attribute 'ripe'"
        with pytest.raises(DatasetError, match=match):
            read_antonyms(path, tiny_vocab)

    def test_vectors_inconsistent_dimension(self, tmp_path: Path):
        path = tmp_path / "vectors.txt"
        path.write_text("car 1 2 3\nhouse 1 2\n")
        with pytest.raises(DatasetError, match=r"vectors.txt:2:.*expected 3"):
            read_object_vectors(path)

    def test_pool_round_trip(self, tmp_path: Path):
        rng = np.random.default_rng(0)
        pool = [(f"p{i}", rng.normal(size=3)) for i in range(4)]
        path = tmp_path / "pool.txt"
        write_pool(path, pool)
        loaded = read_pool(path)
        assert [pid for pid, _ in loaded] == [pid for pid, _ in pool]
        for (_, a), (_, b) in zip(pool, loaded):
            npt.assert_array_equal(a, b)

    def test_pool_bad_header(self, tmp_path: Path):
        path = tmp_path / "pool.txt"
        path.write_text("3\nx 1 2 3\n")
        with pytest.raises(DatasetError, match="header"):
            read_pool(path)


class TestRoundTrip:
    """Test save_dataset / load_dataset_dir identity."""

    @pytest.mark.parametrize("seed", range(10))
    def test_synthetic_bundles(self, tmp_path: Path, seed: int):
        spec = SyntheticSpec(
            n_attrs=4, n_objs=3, dim=3, images_per_pair=2, noise_sigma=0.3, seed=seed,
            antonym_pairs=1,
        )
        bundle, _ = generate_synthetic(spec)
        save_dataset(bundle, tmp_path / "data")
        assert_bundles_equal(bundle, load_dataset_dir(tmp_path / "data"))

    def test_shuffled_vocab_order_survives(
        self, tmp_path: Path, small_synthetic: tuple[DatasetBundle, GroundTruth]
    ):
        bundle, _ = small_synthetic
        bundle.seen_pairs = list(reversed(bundle.seen_pairs))
        save_dataset(bundle, tmp_path / "data")
        assert_bundles_equal(bundle, load_dataset_dir(tmp_path / "data"))


class TestFuzz:
    """Byte flips in fixture files must surface as DatasetError, never a crash."""

    @pytest.mark.parametrize("seed", range(40))
    def test_random_byte_flips(self, minimal_dataset: Path, seed: int):
        rng = np.random.default_rng(seed)
        names = ["pairs.txt", "train_features.txt", "test_features.txt"]
        target = minimal_dataset / names[seed % 3]
        data = bytearray(target.read_bytes())
        for _ in range(1 + seed % 4):
            data[int(rng.integers(0, len(data)))] = int(rng.integers(0, 256))
        target.write_bytes(bytes(data))
        try:
            load_dataset_dir(minimal_dataset)
        except DatasetError as err:
            assert str(err)
