import struct
from pathlib import Path

import numpy as np
import pytest

from deepnmmc.data_io import (
    DataConsistencyError,
    DataFormatError,
    Dataset,
    SampleSpec,
    load_mnist_idx,
    load_newsgroups_binary,
    split_sample,
    subsample,
    subsample_indices,
)

MNIST_DIR = Path("/root/data/mnist")


def write_idx(path, magic, dims, body):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * len(dims), *dims))
        fh.write(bytes(body))


@pytest.fixture
def tiny_mnist(tmp_path):
    pixels = np.arange(3 * 4 * 4) % 256
    pixels[0], pixels[1] = 0, 255
    write_idx(tmp_path / "img", 0x803, (3, 4, 4), pixels.tolist())
    write_idx(tmp_path / "lab", 0x801, (3,), [7, 0, 9])
    return tmp_path / "img", tmp_path / "lab", pixels


class TestMnist:
    def test_shapes_and_scaling(self, tiny_mnist):
        img, lab, pixels = tiny_mnist
        ds = load_mnist_idx(img, lab)
        assert (ds.n, ds.dim) == (3, 16)
        assert ds.instances[0, 0] == 0.0 and ds.instances[0, 1] == 1.0
        assert ds.labels.tolist() == [7, 0, 9]
        assert np.array_equal(np.rint(ds.instances * 255).astype(np.uint8).ravel(), pixels)

    def test_bad_magic(self, tmp_path, tiny_mnist):
        img, lab, _ = tiny_mnist
        with pytest.raises(DataFormatError):
            load_mnist_idx(lab, lab)
        with pytest.raises(DataFormatError):
            load_mnist_idx(img, img)

    def test_count_mismatch(self, tmp_path, tiny_mnist):
        img, _, _ = tiny_mnist
        write_idx(tmp_path / "short", 0x801, (2,), [1, 2])
        with pytest.raises(DataConsistencyError):
            load_mnist_idx(img, tmp_path / "short")

    def test_truncated_body(self, tmp_path):
        write_idx(tmp_path / "img", 0x803, (2, 2, 2), [1, 2, 3])
        write_idx(tmp_path / "lab", 0x801, (2,), [1, 2])
        with pytest.raises(DataFormatError):
            load_mnist_idx(tmp_path / "img", tmp_path / "lab")

    @pytest.mark.skipif(not (MNIST_DIR / "train-images-idx3-ubyte").exists(), reason="MNIST not available")
    def test_real_file_round_trip(self):
        ds = load_mnist_idx(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte")
        assert (ds.n, ds.dim) == (60000, 784)
        raw = np.frombuffer((MNIST_DIR / "train-images-idx3-ubyte").read_bytes(), np.uint8, offset=16)
        assert np.array_equal(np.rint(ds.instances * 255).astype(np.uint8).ravel(), raw)
        assert set(np.unique(ds.labels)) == set(range(10))


class TestNewsgroups:
    def test_parse_one_based(self, tmp_path):
        p = tmp_path / "ng.txt"
        p.write_text("0 1 1 1\n1 0 0 20\n\n1 1 0 5\n")
        ds = load_newsgroups_binary(p)
        assert ds.dim == 3
        assert ds.labels.tolist() == [0, 19, 4]
        assert ds.instances.tolist() == [[0, 1, 1], [1, 0, 0], [1, 1, 0]]

    def test_wide_line(self, tmp_path):
        p = tmp_path / "ng.txt"
        p.write_text(" ".join(["1"] * 5000) + " 3\n")
        assert load_newsgroups_binary(p).dim == 5000

    def test_ragged(self, tmp_path):
        p = tmp_path / "ng.txt"
        p.write_text("0 1 1 1\n1 0 2\n")
        with pytest.raises(DataFormatError):
            load_newsgroups_binary(p)

    def test_non_binary(self, tmp_path):
        p = tmp_path / "ng.txt"
        p.write_text("0 2 1 1\n")
        with pytest.raises(DataFormatError):
            load_newsgroups_binary(p)

    def test_too_many_classes(self, tmp_path):
        p = tmp_path / "ng.txt"
        p.write_text("0 1 0\n1 0 20\n")
        with pytest.raises(DataFormatError):
            load_newsgroups_binary(p)


class TestSubsample:
    DS = Dataset(np.random.default_rng(0).random((5000, 3)), np.arange(5000) % 10)

    def test_full_count_is_permutation(self):
        idx = subsample_indices(50, 50, 3)
        assert sorted(idx.tolist()) == list(range(50))

    def test_deterministic_and_labels_carried(self):
        a, b = subsample(self.DS, 100, 11), subsample(self.DS, 100, 11)
        assert np.array_equal(a.instances, b.instances) and np.array_equal(a.labels, b.labels)
        idx = subsample_indices(5000, 100, 11)
        assert np.array_equal(a.labels, self.DS.labels[idx])

    def test_seeds_differ(self):
        assert set(subsample_indices(5000, 5000 // 2, 1)) != set(subsample_indices(5000, 5000 // 2, 2))

    def test_no_duplicates(self):
        idx = subsample_indices(5000, 4000, 7)
        assert len(set(idx.tolist())) == 4000

    def test_too_many(self):
        with pytest.raises(ValueError):
            subsample(self.DS, 5001, 0)

    def test_split(self):
        train, test = split_sample(self.DS, self.DS, SampleSpec(100, 50, seed=4))
        assert (train.n, test.n) == (100, 50)
        assert not np.array_equal(train.instances[:50], test.instances)


class TestDatasetInvariants:
    def test_range(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[1.5]]))

    def test_label_length(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), np.zeros(3))

    def test_spec(self):
        with pytest.raises(ValueError):
            SampleSpec(0, 1)
        with pytest.raises(ValueError):
            SampleSpec(1, 1, seed=-1)
