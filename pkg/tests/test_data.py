"""Dataset codec, loaders, normalization, augmentation, and batching."""

import os

import numpy as np
import pytest

from tnlayers import data
from tnlayers.init import Rng


# -- binary codec -----------------------------------------------------------------


def test_cifar10_file_sizes_on_disk(cifar10_dir):
    for name in data.CIFAR10_TRAIN_FILES + (data.CIFAR10_TEST_FILE,):
        assert (cifar10_dir / name).stat().st_size == 10000 * 3073


def test_cifar100_file_sizes_on_disk(cifar100_dir):
    assert (cifar100_dir / "train.bin").stat().st_size == 50000 * 3074
    assert (cifar100_dir / "test.bin").stat().st_size == 10000 * 3074


def test_decode_layout_hand_built_record():
    r = np.full(1024, 1, dtype=np.uint8)
    r[2 * 32 + 3] = 9
    rec = bytes([7]) + r.tobytes() + bytes([2] * 1024) + bytes([3] * 1024)
    cols, imgs = data.decode_cifar(rec, 10)
    assert cols.tolist() == [[7]]
    assert imgs.shape == (1, 32, 32, 3)
    assert imgs[0, 2, 3, 0] == 9
    assert imgs[0, 0, 0].tolist() == [1, 2, 3]


def test_decode_cifar100_keeps_coarse_and_fine():
    rec = bytes([5, 42]) + bytes(3072) + bytes([1, 99]) + bytes(3072)
    cols, imgs = data.decode_cifar(rec, 100)
    assert cols.tolist() == [[5, 42], [1, 99]]
    assert imgs.shape == (2, 32, 32, 3)


@pytest.mark.parametrize("variant,record", [(10, 3073), (100, 3074)])
def test_encode_decode_is_bit_faithful(variant, record):
    rng = np.random.default_rng(variant)
    blob = rng.integers(0, 256, 5 * record, dtype=np.uint8).tobytes()
    assert data.encode_cifar(*data.decode_cifar(blob, variant)) == blob


def test_decode_rejects_ragged_blob():
    with pytest.raises(data.DataError, match="records"):
        data.decode_cifar(bytes(3072), 10)


# -- loaders ----------------------------------------------------------------------


def test_load_cifar10_split_sizes_and_content(cifar10_dir, synthetic_pair):
    train, test = synthetic_pair
    s = data.load_cifar(cifar10_dir, 10)
    assert (len(s.train), len(s.val), len(s.test)) == (45000, 5000, 10000)
    assert s.n_classes == 10 and s.name == "cifar10"
    assert s.image_shape == (32, 32, 3)
    # pixel bytes survive the disk roundtrip exactly
    assert np.array_equal(s.train.images, train.images[:45000])
    assert np.array_equal(s.val.images, train.images[45000:])
    assert np.array_equal(s.val.labels, train.labels[45000:])
    assert np.array_equal(s.test.images, test.images)


def test_load_cifar100_uses_fine_label(cifar100_dir, synthetic_pair):
    train, _ = synthetic_pair
    s = data.load_cifar(cifar100_dir, 100)
    assert s.n_classes == 100
    assert (len(s.train), len(s.val), len(s.test)) == (45000, 5000, 10000)
    # the coarse byte was zero; labels must come from the fine byte
    assert np.array_equal(s.train.labels, train.labels[:45000])
    assert np.array_equal(s.train.images, train.images[:45000])


def test_load_cifar_discovers_standard_subdir(cifar10_dir, tmp_path):
    parent = tmp_path / "datasets"
    parent.mkdir()
    os.symlink(cifar10_dir, parent / data.CIFAR10_SUBDIR)
    s = data.load_cifar(parent, 10)
    assert len(s.train) == 45000


def test_load_cifar_reports_expected_and_actual_bytes(cifar10_dir, tmp_path):
    for name in data.CIFAR10_TRAIN_FILES:
        os.symlink(cifar10_dir / name, tmp_path / name)
    good = (cifar10_dir / data.CIFAR10_TEST_FILE).read_bytes()
    (tmp_path / data.CIFAR10_TEST_FILE).write_bytes(good[:-10])
    with pytest.raises(data.DataError, match="30730000.*30729990"):
        data.load_cifar(tmp_path, 10)


def test_load_cifar_missing_files(tmp_path):
    with pytest.raises(data.DataError, match="data_batch_1.bin"):
        data.load_cifar(tmp_path, 10)
    with pytest.raises(data.DataError, match="variant"):
        data.load_cifar(tmp_path, 42)


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    data.write_idx(tmp_path / "x", arr)
    assert np.array_equal(data.load_idx(tmp_path / "x"), arr)
    lab = rng.integers(0, 10, 20, dtype=np.uint8)
    data.write_idx(tmp_path / "y", lab)
    assert np.array_equal(data.load_idx(tmp_path / "y"), lab)


def test_idx_rejects_bad_magic_and_truncation(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x00\x08\x01" + bytes(8))
    with pytest.raises(data.DataError, match="magic"):
        data.load_idx(tmp_path / "bad")
    good = bytes([0, 0, 8, 1]) + (10).to_bytes(4, "big") + bytes(9)
    (tmp_path / "short").write_bytes(good)
    with pytest.raises(data.DataError, match="expected 18 bytes.*got 17"):
        data.load_idx(tmp_path / "short")


def test_load_mnist_layout(tmp_path):
    rng = np.random.default_rng(3)
    ti = rng.integers(0, 256, (6000, 28, 28), dtype=np.uint8)
    tl = rng.integers(0, 10, 6000, dtype=np.uint8)
    ei = rng.integers(0, 256, (50, 28, 28), dtype=np.uint8)
    el = rng.integers(0, 10, 50, dtype=np.uint8)
    data.write_idx(tmp_path / "train-images-idx3-ubyte", ti)
    data.write_idx(tmp_path / "train-labels-idx1-ubyte", tl)
    data.write_idx(tmp_path / "t10k-images-idx3-ubyte", ei)
    data.write_idx(tmp_path / "t10k-labels-idx1-ubyte", el)
    s = data.load_mnist(tmp_path)
    assert s.image_shape == (28, 28, 1)
    assert (len(s.train), len(s.val), len(s.test)) == (1000, 5000, 50)
    assert np.array_equal(s.val.images[..., 0], ti[1000:])
    assert np.array_equal(s.test.labels, el.astype(np.int64))


def test_dataset_validation():
    ok = np.zeros((4, 2, 2, 1), dtype=np.uint8)
    with pytest.raises(data.DataError, match="uint8"):
        data.Dataset(ok.astype(np.float32), np.zeros(4, dtype=np.int64), 10)
    with pytest.raises(data.DataError, match="match"):
        data.Dataset(ok, np.zeros(3, dtype=np.int64), 10)
    with pytest.raises(data.DataError, match="range"):
        data.Dataset(ok, np.array([0, 1, 2, 10]), 10)


# -- normalization ----------------------------------------------------------------


def test_normalize_constant_train_set_is_zero():
    imgs = np.full((10, 4, 4, 3), 128, dtype=np.uint8)
    x = data.normalize(imgs, data.train_mean(imgs))
    assert x.dtype == np.float32
    assert np.all(x == 0.0)


def test_normalize_val_pixel_against_known_mean():
    mean = np.full((2, 2, 3), 0.5)
    val = np.full((1, 2, 2, 3), 255, dtype=np.uint8)
    np.testing.assert_array_equal(data.normalize(val, mean), 0.5)


def test_normalize_recenters_train_split():
    rng = np.random.default_rng(9)
    imgs = rng.integers(0, 256, (50, 8, 8, 3), dtype=np.uint8)
    x = data.normalize(imgs, data.train_mean(imgs), dtype=np.float64)
    assert np.abs(x.mean(axis=0)).max() <= 1e-6


def test_train_mean_shapes_and_per_channel_flag():
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (20, 8, 8, 3), dtype=np.uint8)
    assert data.train_mean(imgs).shape == (8, 8, 3)
    pc = data.train_mean(imgs, per_channel=True)
    assert pc.shape == (3,)
    np.testing.assert_allclose(pc, (imgs / 255.0).mean(axis=(0, 1, 2)))


# -- augmentation -----------------------------------------------------------------


def test_translate_identity_and_shifts():
    img = np.arange(2 * 5 * 5, dtype=np.float64).reshape(5, 5, 2) + 1.0
    assert np.array_equal(data.translate(img, 0, 0), img)
    right = data.translate(img, 4, 0)
    assert np.all(right[:, :4] == 0.0)
    assert np.array_equal(right[:, 4:], img[:, :1])
    down = data.translate(img, 0, 2)
    assert np.all(down[:2] == 0.0)
    assert np.array_equal(down[2:], img[:3])
    left = data.translate(img, -1, 0)
    assert np.all(left[:, -1:] == 0.0)
    assert np.array_equal(left[:, :-1], img[:, 1:])
    assert np.all(data.translate(img, 5, 0) == 0.0)


def test_horizontal_flip_is_an_involution():
    img = np.arange(12.0).reshape(3, 4, 1)
    assert np.array_equal(img[:, ::-1][:, ::-1], img)


def test_augment_outputs_are_flip_translate_variants():
    base = (np.arange(12 * 12, dtype=np.float64).reshape(12, 12, 1) + 1.0)
    variants = []
    for src in (base, base[:, ::-1]):
        for dx in range(-4, 5):
            for dy in range(-4, 5):
                variants.append(data.translate(src, dx, dy))
    batch = np.tile(base, (300, 1, 1, 1))
    out = data.augment(batch, Rng(5).split("aug"))
    flipped = unflipped = shifted = 0
    for i in range(out.shape[0]):
        matches = [k for k, v in enumerate(variants)
                   if np.array_equal(out[i], v)]
        assert matches, f"augmented image {i} is not a flip/translate variant"
        k = matches[0]
        flipped += k >= 81
        unflipped += k < 81
        shifted += k % 81 != 40  # index 40 is dx=dy=0
    assert flipped > 60 and unflipped > 60 and shifted > 200


def test_augment_shape_values_and_determinism():
    rng = np.random.default_rng(2)
    batch = rng.integers(1, 256, (40, 8, 8, 3)).astype(np.float32)
    out = data.augment(batch, Rng(11))
    assert out.shape == batch.shape
    allowed = set(np.unique(batch)) | {0.0}
    assert set(np.unique(out)) <= allowed
    again = data.augment(batch, Rng(11))
    assert np.array_equal(out, again)


# -- batching and subsetting --------------------------------------------------------


def test_epoch_batches_cover_dataset_once():
    batches = data.epoch_batches(45000, 50, Rng(1).split("b"))
    assert len(batches) == 900
    assert all(len(b) == 50 for b in batches)
    flat = np.concatenate(batches)
    assert np.array_equal(np.sort(flat), np.arange(45000))


def test_epoch_batches_keep_short_final():
    sizes = [len(b) for b in data.epoch_batches(105, 50, Rng(0))]
    assert sizes == [50, 50, 5]


def test_batch_stream_reshuffles_each_epoch():
    stream = data.batch_stream(100, 10, Rng(3).split("s"))
    first = [next(stream) for _ in range(10)]
    second = [next(stream) for _ in range(10)]
    assert np.array_equal(np.sort(np.concatenate(first)), np.arange(100))
    assert np.array_equal(np.sort(np.concatenate(second)), np.arange(100))
    assert not all(np.array_equal(a, b) for a, b in zip(first, second))
    replay = data.batch_stream(100, 10, Rng(3).split("s"))
    assert all(np.array_equal(next(replay), b) for b in first)


def test_subset_rule():
    s = data.synthetic_splits(100, 20, 30, seed=4)
    small = data.subset(s, 50)
    assert (len(small.train), len(small.val), len(small.test)) == (50, 10, 10)
    assert np.array_equal(small.train.images, s.train.images[:50])
    with pytest.raises(data.DataError, match="exceeds"):
        data.subset(s, 101)


def test_synthetic_splits_seeded_and_balanced():
    a = data.synthetic_splits(200, 40, 40, seed=7)
    b = data.synthetic_splits(200, 40, 40, seed=7)
    assert np.array_equal(a.train.images, b.train.images)
    assert a.train.images.dtype == np.uint8
    counts = np.bincount(a.train.labels, minlength=10)
    assert counts.min() >= 15  # roughly balanced 10-class draw
    c = data.synthetic_splits(200, 40, 40, seed=8)
    assert not np.array_equal(a.train.images, c.train.images)


def test_synthetic_classes_are_separable():
    ds = data.synthetic_images(400, Rng(6), classes=4)
    x = ds.images.reshape(400, -1).astype(np.float64)
    means = np.stack([x[ds.labels == c].mean(axis=0) for c in range(4)])
    # nearest-class-mean should classify essentially everything
    d = ((x[:, None, :] - means[None]) ** 2).sum(axis=2)
    assert (d.argmin(axis=1) == ds.labels).mean() > 0.95
