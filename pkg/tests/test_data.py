import numpy as np
import pytest

from prosmin.data import (
    DatasetError,
    DatasetSpec,
    cluster_centers,
    load_dataset,
    make_clusters,
    read_idx,
    read_vector_csv,
    write_idx,
    write_vector_csv,
)
from prosmin.scoring import ConfigError


class TestSpec:
    def test_fractions_sum_to_one(self):
        with pytest.raises(ConfigError):
            DatasetSpec(train_fraction=0.5, test_fraction=0.4)

    def test_file_modality_needs_path(self):
        with pytest.raises(ConfigError):
            DatasetSpec(modality="vector_csv")

    def test_cluster_subset_in_range(self):
        with pytest.raises(ConfigError):
            DatasetSpec(clusters=(3,))


class TestClusters:
    def test_adjacent_separation(self):
        c = cluster_centers(3, 2, 6.0)
        d = np.linalg.norm(c[0] - c[1])
        assert d == pytest.approx(6.0)
        assert np.linalg.norm(c[1] - c[2]) == pytest.approx(6.0)

    def test_sizes_and_split(self):
        ds = load_dataset(DatasetSpec(per_cluster=300))
        assert ds.x_train.shape == (600, 2) and ds.x_test.shape == (300, 2)
        assert set(np.unique(ds.y_train)) == {0, 1, 2}

    def test_subset(self):
        x, y = make_clusters(DatasetSpec(n_clusters=4, clusters=(0, 2), per_cluster=10))
        assert len(x) == 20 and set(y) == {0, 2}

    def test_deterministic(self):
        a, _ = make_clusters(DatasetSpec(seed=5))
        b, _ = make_clusters(DatasetSpec(seed=5))
        assert a.tobytes() == b.tobytes()


class TestCsv:
    def test_round_trip_with_labels(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(5, 3))
        y = np.array([0, 1, 2, 1, 0])
        write_vector_csv(tmp_path / "d.csv", x, y)
        x2, y2 = read_vector_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(x2, x)
        np.testing.assert_array_equal(y2, y)

    def test_without_labels(self, tmp_path):
        x = np.ones((2, 2))
        write_vector_csv(tmp_path / "d.csv", x)
        x2, y2 = read_vector_csv(tmp_path / "d.csv")
        assert y2 is None and x2.shape == (2, 2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            read_vector_csv(tmp_path / "nope.csv")

    def test_non_numeric(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,b\n1,x\n")
        with pytest.raises(DatasetError):
            read_vector_csv(tmp_path / "d.csv")

    def test_load_through_spec(self, tmp_path):
        x = np.arange(12.0).reshape(6, 2)
        write_vector_csv(tmp_path / "d.csv", x, np.arange(6) % 2)
        ds = load_dataset(DatasetSpec(modality="vector_csv", path=str(tmp_path / "d.csv"),
                                      train_fraction=0.5, test_fraction=0.5))
        assert len(ds.x_train) == 3 and len(ds.x_test) == 3


class TestIdx:
    def test_image_magic(self, tmp_path):
        imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        write_idx(tmp_path / "i.idx", imgs)
        raw = (tmp_path / "i.idx").read_bytes()
        assert raw[:4] == bytes.fromhex("00000803")
        assert raw[4:16] == bytes.fromhex("00000002" "00000003" "00000003")

    def test_label_magic(self, tmp_path):
        write_idx(tmp_path / "l.idx", np.array([1, 2, 3], dtype=np.uint8))
        assert (tmp_path / "l.idx").read_bytes()[:8] == bytes.fromhex("00000801" "00000003")

    @pytest.mark.parametrize("dtype", [np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64])
    def test_round_trip(self, tmp_path, dtype):
        arr = (np.random.default_rng(0).normal(size=(3, 4)) * 50).astype(dtype)
        write_idx(tmp_path / "a.idx", arr)
        back = read_idx(tmp_path / "a.idx")
        np.testing.assert_array_equal(back, arr)
        assert (tmp_path / "a.idx").read_bytes()[:2] == b"\x00\x00"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.idx").write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x01\x00")
        with pytest.raises(DatasetError):
            read_idx(tmp_path / "bad.idx")

    def test_truncated(self, tmp_path):
        write_idx(tmp_path / "a.idx", np.zeros((4, 4), dtype=np.uint8))
        raw = (tmp_path / "a.idx").read_bytes()
        (tmp_path / "a.idx").write_bytes(raw[:-1])
        with pytest.raises(DatasetError):
            read_idx(tmp_path / "a.idx")

    def test_load_images(self, tmp_path):
        imgs = np.random.default_rng(0).integers(0, 256, (6, 4, 4)).astype(np.uint8)
        write_idx(tmp_path / "i.idx", imgs)
        write_idx(tmp_path / "l.idx", np.arange(6, dtype=np.uint8) % 2)
        ds = load_dataset(DatasetSpec(modality="image_idx", path=str(tmp_path / "i.idx"),
                                      label_path=str(tmp_path / "l.idx"),
                                      train_fraction=0.5, test_fraction=0.5))
        assert ds.x_train.shape == (3, 16)
        assert ds.x_train.max() <= 1.0
