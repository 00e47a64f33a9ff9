"""Dataset ingestion, normalization, augmentation, and deterministic batching.

Supports the CIFAR-10/100 binary layouts and the big-endian IDX format.
Images are kept as (N, H, W, C) unsigned bytes until normalization; every
random choice (shuffles, flips, translations) flows through a seeded Rng.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .init import Rng

CIFAR_PIXELS = 32 * 32 * 3
CIFAR10_RECORD = 1 + CIFAR_PIXELS
CIFAR100_RECORD = 2 + CIFAR_PIXELS

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_SUBDIR = "cifar-10-batches-bin"
CIFAR100_SUBDIR = "cifar-100-binary"

VAL_SIZE = 5000


class DataError(Exception):
    """Raised for missing, truncated, or malformed dataset files."""


@dataclass(frozen=True)
class Dataset:
    """One split of labeled images: (N, H, W, C) uint8 plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        img, lab = self.images, self.labels
        if img.ndim != 4 or img.dtype != np.uint8:
            raise DataError(f"images must be 4-d uint8, got {img.dtype} "
                            f"array of shape {img.shape}")
        if lab.shape != (img.shape[0],):
            raise DataError(f"labels shape {lab.shape} does not match "
                            f"{img.shape[0]} images")
        if lab.size and (lab.min() < 0 or lab.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes}), "
                            f"found range [{lab.min()}, {lab.max()}]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class Splits:
    """Train / validation / test partition of a dataset."""

    train: Dataset
    val: Dataset
    test: Dataset
    name: str

    @property
    def n_classes(self) -> int:
        return self.train.n_classes

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.train.images.shape[1:]


# -- CIFAR binary codec -----------------------------------------------------------


def decode_cifar(blob: bytes, variant: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a CIFAR binary blob into label columns and HWC images.

    Returns (label_cols, images) where label_cols is (N, 1) for CIFAR-10
    and (N, 2) (coarse, fine) for CIFAR-100; images are (N, 32, 32, 3)
    uint8.  Keeping every label byte makes encode_cifar an exact inverse.
    """
    record = {10: CIFAR10_RECORD, 100: CIFAR100_RECORD}[variant]
    if len(blob) % record != 0:
        raise DataError(f"blob of {len(blob)} bytes is not a whole number "
                        f"of {record}-byte records")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
    label_cols = raw[:, : record - CIFAR_PIXELS].copy()
    planes = raw[:, record - CIFAR_PIXELS:].reshape(-1, 3, 32, 32)
    images = np.ascontiguousarray(planes.transpose(0, 2, 3, 1))
    return label_cols, images


def encode_cifar(label_cols: np.ndarray, images: np.ndarray) -> bytes:
    """Inverse of decode_cifar: reserialize to the CIFAR binary layout."""
    n = images.shape[0]
    planes = images.transpose(0, 3, 1, 2).reshape(n, CIFAR_PIXELS)
    return np.concatenate([label_cols, planes], axis=1).tobytes()


def _read_exact(path: Path, n_records: int, record: int) -> bytes:
    expected = n_records * record
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing dataset file {path}") from None
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes "
                        f"({n_records} records of {record}), got {len(blob)}")
    return blob


def _find_dir(data_dir, first_file: str, subdir: str) -> Path:
    base = Path(data_dir)
    for cand in (base, base / subdir):
        if (cand / first_file).is_file():
            return cand
    raise DataError(f"no {first_file} under {base} or {base / subdir}")


def load_cifar(data_dir, variant: int = 10) -> Splits:
    """Load CIFAR-10 or CIFAR-100 binaries into canonical splits.

    The last 5,000 of the 50,000 training images become the validation
    split, leaving 45,000 / 5,000 / 10,000.  CIFAR-100 uses fine labels.
    """
    if variant == 10:
        root = _find_dir(data_dir, CIFAR10_TRAIN_FILES[0], CIFAR10_SUBDIR)
        parts = [decode_cifar(_read_exact(root / f, 10000, CIFAR10_RECORD), 10)
                 for f in CIFAR10_TRAIN_FILES]
        labels = np.concatenate([p[0][:, -1] for p in parts]).astype(np.int64)
        images = np.concatenate([p[1] for p in parts])
        tl, ti = decode_cifar(
            _read_exact(root / CIFAR10_TEST_FILE, 10000, CIFAR10_RECORD), 10)
        classes, name = 10, "cifar10"
    elif variant == 100:
        root = _find_dir(data_dir, "train.bin", CIFAR100_SUBDIR)
        cols, images = decode_cifar(
            _read_exact(root / "train.bin", 50000, CIFAR100_RECORD), 100)
        labels = cols[:, -1].astype(np.int64)
        tl, ti = decode_cifar(
            _read_exact(root / "test.bin", 10000, CIFAR100_RECORD), 100)
        classes, name = 100, "cifar100"
    else:
        raise DataError(f"variant must be 10 or 100, got {variant}")
    test = Dataset(ti, tl[:, -1].astype(np.int64), classes)
    cut = len(labels) - VAL_SIZE
    return Splits(Dataset(images[:cut], labels[:cut], classes),
                  Dataset(images[cut:], labels[cut:], classes), test, name)


def write_cifar10(data_dir, train: Dataset, test: Dataset) -> None:
    """Write a dataset in the CIFAR-10 binary layout (5 train batch files)."""
    if len(train) != 50000 or len(test) != 10000:
        raise DataError(f"CIFAR-10 layout needs 50000 train / 10000 test "
                        f"images, got {len(train)} / {len(test)}")
    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    cols = train.labels.astype(np.uint8)[:, None]
    for i, name in enumerate(CIFAR10_TRAIN_FILES):
        sl = slice(i * 10000, (i + 1) * 10000)
        (root / name).write_bytes(encode_cifar(cols[sl], train.images[sl]))
    (root / CIFAR10_TEST_FILE).write_bytes(
        encode_cifar(test.labels.astype(np.uint8)[:, None], test.images))


# -- IDX (MNIST-style) -------------------------------------------------------------


def load_idx(path) -> np.ndarray:
    """Read one big-endian IDX file of unsigned bytes."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing dataset file {path}") from None
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise DataError(f"{path}: not an IDX file (bad magic)")
    code, ndim = blob[2], blob[3]
    if code != 0x08:
        raise DataError(f"{path}: only unsigned-byte IDX supported, "
                        f"got type code 0x{code:02x}")
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes for dims {dims}, "
                        f"got {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim])
    header += struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_mnist(data_dir) -> Splits:
    """Load the four classic IDX files; validation is the last 5,000."""
    root = _find_dir(data_dir, "train-images-idx3-ubyte", "mnist")
    imgs = load_idx(root / "train-images-idx3-ubyte")[..., None]
    labs = load_idx(root / "train-labels-idx1-ubyte").astype(np.int64)
    ti = load_idx(root / "t10k-images-idx3-ubyte")[..., None]
    tl = load_idx(root / "t10k-labels-idx1-ubyte").astype(np.int64)
    cut = len(labs) - VAL_SIZE
    if cut <= 0:
        raise DataError(f"train split of {len(labs)} images cannot spare "
                        f"{VAL_SIZE} for validation")
    return Splits(Dataset(imgs[:cut], labs[:cut], 10),
                  Dataset(imgs[cut:], labs[cut:], 10),
                  Dataset(ti, tl, 10), "mnist")


# -- synthetic data ----------------------------------------------------------------


def synthetic_images(n: int, rng: Rng, classes: int = 10, size: int = 32,
                     channels: int = 3, noise: float = 24.0) -> Dataset:
    """Blocky per-class templates plus pixel noise: cheap but learnable.

    Each class gets a fixed random 4x4 block pattern upsampled to the full
    image; samples add Gaussian noise and clip to byte range.  Classes stay
    separable under small translations, so augmented training still works.
    """
    if size % 4 != 0:
        raise DataError(f"size must be a multiple of 4, got {size}")
    block = size // 4
    templates = np.kron(rng.uniform((classes, 4, 4, channels)) * 255.0,
                        np.ones((1, block, block, 1)))
    labels = rng.permutation(n) % classes
    out = np.empty((n, size, size, channels), dtype=np.uint8)
    step = 4096  # bound the float64 working set for large n
    for i in range(0, n, step):
        lab = labels[i:i + step]
        chunk = templates[lab] + rng.normal(
            (len(lab), size, size, channels)) * noise
        np.clip(chunk, 0, 255, out=chunk)
        out[i:i + step] = chunk.astype(np.uint8)
    return Dataset(out, labels.astype(np.int64), classes)


def synthetic_splits(n_train: int, n_val: int, n_test: int, seed: int = 0,
                     classes: int = 10, size: int = 32,
                     channels: int = 3) -> Splits:
    rng = Rng(seed).split("synthetic")
    total = synthetic_images(n_train + n_val + n_test, rng, classes, size,
                             channels)
    a, b = n_train, n_train + n_val
    return Splits(total.take(slice(0, a)), total.take(slice(a, b)),
                  total.take(slice(b, None)), "synthetic")


def subset(splits: Splits, n_train: int) -> Splits:
    """Desk-scale reduction: first n_train train images, matching smaller
    validation and test splits (n_train // 5 each, from the front)."""
    k = max(1, n_train // 5)
    if n_train > len(splits.train):
        raise DataError(f"subset of {n_train} exceeds the {len(splits.train)}"
                        f"-image train split")
    return Splits(splits.train.take(slice(0, n_train)),
                  splits.val.take(slice(0, min(k, len(splits.val)))),
                  splits.test.take(slice(0, min(k, len(splits.test)))),
                  splits.name)


# -- normalization -----------------------------------------------------------------


def train_mean(train_images: np.ndarray, per_channel: bool = False) -> np.ndarray:
    """Mean of train pixels after the /255 rescale.

    Default is a per-pixel-position mean image (H, W, C); per_channel
    collapses it to one scalar per channel.
    """
    x = train_images.astype(np.float64) / 255.0
    axes = (0, 1, 2) if per_channel else (0,)
    return x.mean(axis=axes)


def normalize(images: np.ndarray, mean: np.ndarray,
              dtype=np.float32) -> np.ndarray:
    """x / 255 minus the (train-derived) mean, in the requested dtype."""
    return (images.astype(np.float64) / 255.0 - mean).astype(dtype)


# -- augmentation ------------------------------------------------------------------

MAX_SHIFT = 4


def translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content by (dx right, dy down); vacated pixels are zero."""
    h, w = img.shape[0], img.shape[1]
    if abs(dx) >= w or abs(dy) >= h:
        return np.zeros_like(img)
    out = np.zeros_like(img)
    src_r = slice(max(0, -dy), h - max(0, dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def augment(batch: np.ndarray, rng: Rng) -> np.ndarray:
    """Train-time augmentation: per-image horizontal flip with probability
    1/2 and integer translation with dx, dy uniform on [-4, 4]."""
    n = batch.shape[0]
    flips = rng.uniform((n,)) < 0.5
    shifts = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, (n, 2))
    out = np.empty_like(batch)
    for i in range(n):
        img = batch[i, :, ::-1] if flips[i] else batch[i]
        out[i] = translate(img, int(shifts[i, 0]), int(shifts[i, 1]))
    return out


# -- batching ----------------------------------------------------------------------


def epoch_batches(n: int, size: int, rng: Rng) -> list[np.ndarray]:
    """Index batches for one epoch: a fresh permutation cut into runs of
    `size`, keeping the short final batch."""
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def batch_stream(n: int, size: int, rng: Rng):
    """Endless batch index stream, reshuffled every epoch."""
    while True:
        yield from epoch_batches(n, size, rng)


class BatchCursor:
    """Resumable epoch-shuffled batch iterator.

    Draws one permutation per epoch from its Rng and hands out slices of
    it.  state() captures the generator state from just before the current
    epoch's draw plus the position inside it, so restore() reproduces the
    remaining batch sequence bit for bit.
    """

    def __init__(self, n: int, size: int, rng: Rng):
        if size < 1:
            raise ValueError(f"batch size must be >= 1, got {size}")
        self.n, self.size, self.rng = int(n), int(size), rng
        self._begin_epoch()

    def _begin_epoch(self) -> None:
        self._epoch_state = self.rng.state()
        self._perm = self.rng.permutation(self.n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self.n:
            self._begin_epoch()
        batch = self._perm[self._pos:self._pos + self.size]
        self._pos += self.size
        return batch

    def state(self) -> dict:
        return {"epoch_state": self._epoch_state, "pos": self._pos}

    def restore(self, state: dict) -> None:
        self.rng.set_state(state["epoch_state"])
        self._begin_epoch()
        self._pos = int(state["pos"])
