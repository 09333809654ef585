"""Datasets: CIFAR-10 binary batches, a seeded synthetic shapes set,
training augmentation and holdout splitting.

Images are float32 arrays of shape (C, H, W) with values in [0, 1] until
they are normalized with per-channel statistics of a training split.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, UsageError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int


@dataclass
class ImageSet:
    """Stacked images (N, C, H, W) float32 and labels (N,) int64.

    Indexing with an int yields a :class:`LabeledImage`, so the set also
    behaves as a list of samples.
    """

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} do not form a dataset")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabeledImage(self.images[i], int(self.labels[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx])

    @classmethod
    def from_list(cls, samples, shape=CIFAR_SHAPE):
        samples = list(samples)
        if not samples:
            return cls(np.zeros((0,) + tuple(shape), np.float32), np.zeros(0, np.int64))
        return cls(np.stack([s.pixels for s in samples]), np.array([s.label for s in samples]))

    def to_list(self):
        return list(self)

    def normalized(self, mean, std):
        return ImageSet(normalize(self.images, mean, std), self.labels)


@dataclass
class DatasetSplit:
    """Train/validation(/test) sets plus normalization statistics of the train part."""

    train: ImageSet
    validation: ImageSet
    mean: np.ndarray
    std: np.ndarray
    test: ImageSet | None = None


# CIFAR-10 binary format

def decode_cifar10_binary(raw, source="<bytes>"):
    raw = bytes(raw)
    if len(raw) % CIFAR_RECORD:
        n = len(raw) // CIFAR_RECORD
        raise FormatError(
            f"{source}: size {len(raw)} bytes is not a multiple of {CIFAR_RECORD}; "
            f"expected {n * CIFAR_RECORD} or {(n + 1) * CIFAR_RECORD} bytes"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float32) / np.float32(255.0)
    return ImageSet(images, labels)


def load_cifar10_binary(path):
    """Parse one CIFAR-10 binary batch file (label byte + 3072 RGB plane bytes per record)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return decode_cifar10_binary(raw, str(path))


def encode_cifar10_binary(dataset):
    if tuple(dataset.images.shape[1:]) != CIFAR_SHAPE:
        raise DataError(f"CIFAR-10 records hold 3x32x32 images, got {dataset.images.shape[1:]}")
    if len(dataset) and (dataset.labels.min() < 0 or dataset.labels.max() > 9):
        raise DataError("CIFAR-10 labels must lie in [0, 9]")
    pix = np.rint(np.clip(dataset.images, 0.0, 1.0) * np.float32(255.0)).astype(np.uint8)
    rec = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = pix.reshape(len(dataset), -1)
    return rec.tobytes()


def write_cifar10_binary(path, dataset):
    Path(path).write_bytes(encode_cifar10_binary(dataset))


def load_cifar10_dir(root):
    """Training batches 1-5 and the test batch from an extracted archive directory."""
    root = Path(root)
    parts = [load_cifar10_binary(root / f) for f in CIFAR_TRAIN_FILES]
    train = ImageSet(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    return train, load_cifar10_binary(root / CIFAR_TEST_FILE)


# synthetic shapes

def _disk(dx, dy, r):
    return dx * dx + dy * dy <= r * r


def _square(dx, dy, r):
    return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r


def _cross(dx, dy, r):
    ax, ay = np.abs(dx), np.abs(dy)
    arm = max(r / 3.0, 0.75)
    return ((ax <= arm) & (ay <= r)) | ((ay <= arm) & (ax <= r))


def _stripes(dx, dy, r):
    period = max(r / 2.0, 2.0)
    return _square(dx, dy, r) & (np.floor((dy + r) / period) % 2 == 0)


def _ring(dx, dy, r):
    d2 = dx * dx + dy * dy
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def _triangle(dx, dy, r):
    return (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) * 0.5)


def _vstripes(dx, dy, r):
    return _stripes(dy, dx, r)


def _diamond(dx, dy, r):
    return np.abs(dx) + np.abs(dy) <= r


SHAPES = {
    "disk": _disk, "square": _square, "cross": _cross, "stripes": _stripes,
    "ring": _ring, "triangle": _triangle, "vstripes": _vstripes, "diamond": _diamond,
}
SHAPE_NAMES = tuple(SHAPES)


def _render(rng, label, resolution, hard):
    h, w = resolution
    side = min(h, w)
    if hard:
        r = rng.uniform(0.12, 0.2) * side
        contrast = rng.uniform(0.12, 0.25)
        noise = 0.06
    else:
        r = rng.uniform(0.28, 0.42) * side
        contrast = rng.uniform(0.45, 0.8)
        noise = 0.03
    cy = rng.uniform(r, h - r)
    cx = rng.uniform(r, w - r)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = SHAPES[SHAPE_NAMES[label]](xx + 0.5 - cx, yy + 0.5 - cy, r)
    background = rng.uniform(0.25, 0.75, size=3)
    direction = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0, size=3)
    foreground = np.clip(background + contrast * direction, 0.0, 1.0)
    img = np.where(mask[None], foreground[:, None, None], background[:, None, None])
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthesize_dataset(seed, n_per_class, classes=4, resolution=(32, 32), difficulty=0.3):
    """Balanced geometric-shape classes with a tunable share of hard samples.

    ``difficulty`` is the fraction of samples drawn small and low-contrast.
    Sample ``i`` has label ``i % classes`` and its own derived random stream,
    so any sample can be regenerated independently.
    """
    if classes < 2:
        raise UsageError(f"need at least 2 classes, got {classes}")
    if classes > len(SHAPES):
        raise UsageError(f"the synthetic generator has {len(SHAPES)} shape classes, {classes} requested")
    if not 0.0 <= difficulty <= 1.0:
        raise UsageError(f"difficulty must lie in [0, 1], got {difficulty}")
    resolution = tuple(int(v) for v in resolution)
    n = n_per_class * classes
    images = np.empty((n, 3) + resolution, dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % classes
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        hard = rng.random() < difficulty
        images[i] = _render(rng, int(labels[i]), resolution, hard)
    return ImageSet(images, labels)


# normalization and augmentation

def channel_stats(images):
    """Per-channel mean and (population) standard deviation in float64."""
    if not len(images):
        raise DataError("cannot compute channel statistics of an empty set")
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(images, mean, std):
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    shape = (1,) * (np.ndim(images) - 3) + (-1, 1, 1)
    return ((np.asarray(images, dtype=np.float64) - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def hflip(image):
    return image[..., ::-1]


def pad_crop(image, pad, offset):
    """Zero-pad by ``pad`` on each side, then crop the original size at ``offset``."""
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + h, pad:pad + w] = image
    oy, ox = offset
    return padded[:, oy:oy + h, ox:ox + w]


def augment(image, rng, mean=None, std=None, pad=4, flip_prob=0.5):
    """Random crop after zero padding, random horizontal flip, normalization.

    Padding happens before normalization, so padded borders are black in
    pixel space as with the usual CIFAR pipeline.
    """
    offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    out = pad_crop(image, pad, offset)
    if rng.random() < flip_prob:
        out = hflip(out)
    if mean is not None:
        out = normalize(out, mean, std)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment_batch(images, seed, epoch, indices, mean, std, pad=4):
    """Augment a batch; sample ``indices[i]`` uses its own (seed, epoch, index) stream."""
    out = np.empty(images.shape, dtype=np.float32)
    for i, idx in enumerate(indices):
        out[i] = augment(images[i], np.random.default_rng([seed, epoch, int(idx)]), None, None, pad)
    return normalize(out, mean, std)


def split_holdout(train, holdout_n, seed):
    """Seeded shuffle, last ``holdout_n`` samples become validation; stats from the rest."""
    n = len(train)
    if not 0 <= holdout_n < n:
        raise UsageError(f"holdout of {holdout_n} needs 0 <= holdout < {n} training samples")
    perm = np.random.default_rng(seed).permutation(n)
    tr, va = perm[: n - holdout_n], perm[n - holdout_n:]
    train_part = train.subset(np.sort(tr))
    mean, std = channel_stats(train_part.images)
    return DatasetSplit(train_part, train.subset(np.sort(va)), mean, std)


def synthetic_splits(seed, n_train=2000, n_val=500, n_test=500, classes=4, resolution=(32, 32), difficulty=0.3):
    """Train/validation from one generator stream, test from an independent one."""
    for name, v in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if v % classes:
            raise UsageError(f"{name}={v} is not a multiple of {classes} classes")
    pool = synthesize_dataset(seed, (n_train + n_val) // classes, classes, resolution, difficulty)
    split = split_holdout(pool, n_val, seed)
    split.test = synthesize_dataset(seed + 1_000_003, n_test // classes, classes, resolution, difficulty)
    return split
