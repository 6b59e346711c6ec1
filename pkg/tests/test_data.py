import struct

import numpy as np
import pytest

from mmrb import data as data_mod
from mmrb.data import Dataset, load_cifar10, load_mnist, make_digits, save_mnist, subset_split
from mmrb.errors import DataFormatError


@pytest.fixture
def idx_pair(tmp_path):
    ds = make_digits(64, seed=1)
    images, labels = tmp_path / "imgs.idx", tmp_path / "lbls.idx"
    save_mnist(ds, images, labels)
    return ds, images, labels


class TestLoadMnist:
    def test_roundtrip_values(self, idx_pair):
        ds, images, labels = idx_pair
        loaded = load_mnist(images, labels)
        np.testing.assert_array_equal(loaded.images, ds.images)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        assert loaded.images.shape == (64, 28, 28, 1)

    def test_roundtrip_reproduces_source_bytes(self, idx_pair, tmp_path):
        _, images, labels = idx_pair
        loaded = load_mnist(images, labels)
        im2, lb2 = tmp_path / "imgs2.idx", tmp_path / "lbls2.idx"
        save_mnist(loaded, im2, lb2)
        assert im2.read_bytes() == images.read_bytes()
        assert lb2.read_bytes() == labels.read_bytes()

    def test_byte_255_maps_to_one(self, tmp_path):
        images, labels = tmp_path / "i.idx", tmp_path / "l.idx"
        with open(images, "wb") as f:
            f.write(struct.pack(">IIII", 0x803, 1, 2, 2))
            f.write(bytes([255, 0, 128, 64]))
        with open(labels, "wb") as f:
            f.write(struct.pack(">II", 0x801, 1))
            f.write(bytes([7]))
        ds = load_mnist(images, labels)
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[0, 1, 0, 0] == 128 / 255
        assert ds.labels[0] == 7

    def test_bad_magic_rejected(self, idx_pair, tmp_path):
        _, images, labels = idx_pair
        blob = bytearray(images.read_bytes())
        blob[3] = 0x99
        bad = tmp_path / "bad.idx"
        bad.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError):
            load_mnist(bad, labels)

    def test_truncated_payload_rejected(self, idx_pair, tmp_path):
        _, images, labels = idx_pair
        blob = images.read_bytes()
        bad = tmp_path / "trunc.idx"
        bad.write_bytes(blob[:-10])
        with pytest.raises(DataFormatError):
            load_mnist(bad, labels)

    def test_count_mismatch_rejected(self, idx_pair, tmp_path):
        ds, images, _ = idx_pair
        labels = tmp_path / "short.idx"
        with open(labels, "wb") as f:
            f.write(struct.pack(">II", 0x801, 10))
            f.write(ds.labels[:10].astype(np.uint8).tobytes())
        with pytest.raises(DataFormatError):
            load_mnist(images, labels)


def write_cifar(path, n, rng=None):
    recs = np.zeros((n, 3073), dtype=np.uint8)
    if rng is not None:
        recs[:, 0] = rng.integers(0, 10, size=n)
        recs[:, 1:] = rng.integers(0, 256, size=(n, 3072))
    path.write_bytes(recs.tobytes())
    return recs


class TestLoadCifar10:
    def test_shapes_and_scaling(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "batch.bin"
        recs = write_cifar(path, 5, rng)
        ds = load_cifar10([path])
        assert ds.images.shape == (5, 32, 32, 3)
        assert ds.labels.tolist() == recs[:, 0].tolist()
        # channel-planar layout: red plane first
        np.testing.assert_allclose(ds.images[0, 0, 0, 0], recs[0, 1] / 255)
        np.testing.assert_allclose(ds.images[0, 0, 0, 1], recs[0, 1 + 1024] / 255)

    def test_all_zero_record(self, tmp_path):
        path = tmp_path / "zeros.bin"
        write_cifar(path, 1)
        ds = load_cifar10([path])
        np.testing.assert_array_equal(ds.images, np.zeros((1, 32, 32, 3)))

    def test_wrong_size_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(3074))
        with pytest.raises(DataFormatError):
            load_cifar10([path])

    def test_label_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "label.bin"
        recs = np.zeros((1, 3073), dtype=np.uint8)
        recs[0, 0] = 11
        path.write_bytes(recs.tobytes())
        with pytest.raises(DataFormatError):
            load_cifar10([path])


class TestAugmentCifar:
    def test_deterministic(self):
        rng = np.random.default_rng(3)
        batch = rng.random((6, 32, 32, 3))
        a = data_mod.augment_cifar(batch, seed=4)
        b = data_mod.augment_cifar(batch, seed=4)
        np.testing.assert_array_equal(a, b)

    def test_flip_is_involution(self):
        rng = np.random.default_rng(5)
        img = rng.random((32, 32, 3))
        np.testing.assert_array_equal(img[:, ::-1, :][:, ::-1, :], img)

    def test_output_is_crop_of_padded_input(self):
        rng = np.random.default_rng(6)
        batch = rng.random((3, 32, 32, 3))
        out = data_mod.augment_cifar(batch, seed=7)
        assert out.shape == batch.shape
        # each output row either appears in the padded image or is zeros
        padded = np.pad(batch, ((0, 0), (4, 4), (4, 4), (0, 0)))
        for i in range(3):
            found = False
            for oy in range(9):
                for ox in range(9):
                    crop = padded[i, oy:oy + 32, ox:ox + 32, :]
                    if np.array_equal(out[i], crop) or np.array_equal(out[i], crop[:, ::-1, :]):
                        found = True
            assert found

    def test_wrong_shape_rejected(self):
        with pytest.raises(ValueError):
            data_mod.augment_cifar(np.zeros((1, 28, 28, 1)), seed=0)


class TestSubsetSplit:
    def test_full_split_is_permutation(self):
        ds = make_digits(50, seed=8)
        train, evalset = subset_split(ds, 50, 0, seed=9)
        assert len(train) == 50 and len(evalset) == 0
        np.testing.assert_array_equal(np.sort(train.labels), np.sort(ds.labels))

    def test_stratified_counts_within_one(self):
        ds = make_digits(3000, seed=10)
        train, _ = subset_split(ds, 1000, 200, seed=11)
        counts = np.bincount(train.labels, minlength=10)
        assert counts.max() - counts.min() <= 1
        assert counts.sum() == 1000

    def test_disjoint(self):
        ds = make_digits(300, seed=12)
        # tag each image with a unique pixel so overlaps are detectable
        ds.images[:, 27, 27, 0] = np.arange(300) / 255.0 / 300
        train, evalset = subset_split(ds, 100, 100, seed=13)
        tags_train = set(train.images[:, 27, 27, 0].tolist())
        tags_eval = set(evalset.images[:, 27, 27, 0].tolist())
        assert not tags_train & tags_eval

    def test_insufficient_data_rejected(self):
        ds = make_digits(30, seed=14)
        with pytest.raises(ValueError):
            subset_split(ds, 25, 10, seed=15)


class TestDatasetInvariants:
    def test_pixel_range_enforced(self):
        with pytest.raises(ValueError):
            Dataset(np.full((1, 2, 2, 1), 1.5), np.array([0]))

    def test_count_mismatch_enforced(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2, 2, 1)), np.array([0]))


class TestMakeDigits:
    def test_deterministic(self):
        a, b = make_digits(20, seed=16), make_digits(20, seed=16)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_pixels_in_unit_range_and_quantized(self):
        ds = make_digits(10, seed=17)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        np.testing.assert_array_equal(np.round(ds.images * 255) / 255, ds.images)

    def test_all_classes_present(self):
        ds = make_digits(500, seed=18)
        assert set(ds.labels.tolist()) == set(range(10))
