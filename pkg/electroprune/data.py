"""
Dataset provisioning: MNIST IDX files, CIFAR-10 binary batches, and
seeded synthetic classification tasks.

Files are parsed bit-exactly and in order; nothing is shuffled here.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    CifarSizeError,
    DatasetNotFoundError,
    IdxCountMismatchError,
    IdxDimensionError,
    IdxMagicError,
    IdxTruncatedError,
)

logger = logging.getLogger("electroprune")

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{index}.bin" for index in range(1, 6)],
    "test": ["test_batch.bin"],
}

#: Prototype separation of `synthetic_task` unless one is given. At this
#: value a two-convolution network reaches 90% within five epochs.
SYNTHETIC_SEPARATION = 3.0


@dataclass(frozen=True)
class Dataset:
    """
    Normalised images and their labels.

    Parameters
    ----------
    images : `numpy.ndarray`
       Shape ``[samples, channels, height, width]``.
    labels : `numpy.ndarray`
       Integer class ids.
    classes : int
    split : str
       ``"train"`` or ``"test"``.
    mean, std : tuple
       The per-channel normalisation which was applied.
    """

    images: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"
    mean: tuple = (0.0,)
    std: tuple = (1.0,)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images do not match {len(self.labels)} labels."
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"Labels must lie in [0, {self.classes}).")
        if not np.isfinite(self.images).all():
            raise ValueError("Images must be finite.")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def denormalize(self):
        """Undo the normalisation, returning the raw ``[0, 1]`` intensities."""
        mean = np.asarray(self.mean)[None, :, None, None]
        std = np.asarray(self.std)[None, :, None, None]
        return self.images * std + mean

    def batches(self, batch_size, rng=None):
        """
        Yield ``(images, labels)`` batches, shuffled when ``rng`` is given.
        """
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            index = order[start:start + batch_size]
            yield self.images[index], self.labels[index]

    def subset(self, count):
        """The first ``count`` samples."""
        return Dataset(self.images[:count], self.labels[:count], self.classes,
                       self.split, self.mean, self.std)


def normalize(pixels, mean, std):
    """Scale bytes to ``[0, 1]`` then standardise per channel."""
    images = pixels.astype(np.float64) / 255.0
    mean = np.asarray(mean)[None, :, None, None]
    std = np.asarray(std)[None, :, None, None]
    return (images - mean) / std


def _read_bytes(path):
    if not os.path.exists(path):
        raise DatasetNotFoundError(f"The file {path} does not exist.")
    with open(path, "rb") as handle:
        return handle.read()


def _idx_header(payload, path, magic, dimensions):
    header_bytes = 4 * (1 + dimensions)
    if len(payload) < header_bytes:
        raise IdxTruncatedError(
            f"{path} holds {len(payload)} bytes, fewer than its {header_bytes}-byte header."
        )
    header = np.frombuffer(payload, dtype=">u4", count=1 + dimensions)
    if header[0] != magic:
        raise IdxMagicError(
            f"{path} starts with magic {int(header[0])}, expected {magic}."
        )
    return [int(value) for value in header[1:]], header_bytes


def read_idx_images(path):
    """Read an IDX image file into a ``uint8`` array of shape ``[n, 28, 28]``."""
    payload = _read_bytes(path)
    (count, rows, cols), offset = _idx_header(payload, path, IDX_IMAGE_MAGIC, 3)
    if (rows, cols) != (28, 28):
        raise IdxDimensionError(f"{path} holds {rows}x{cols} images, expected 28x28.")
    expected = count * rows * cols
    if len(payload) - offset < expected:
        raise IdxTruncatedError(
            f"{path} declares {count} images but holds only {len(payload) - offset} pixel bytes."
        )
    pixels = np.frombuffer(payload, dtype=np.uint8, count=expected, offset=offset)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path):
    """Read an IDX label file into a ``uint8`` array."""
    payload = _read_bytes(path)
    (count,), offset = _idx_header(payload, path, IDX_LABEL_MAGIC, 1)
    if len(payload) - offset < count:
        raise IdxTruncatedError(
            f"{path} declares {count} labels but holds only {len(payload) - offset} bytes."
        )
    return np.frombuffer(payload, dtype=np.uint8, count=count, offset=offset)


def load_mnist_idx(images_path, labels_path, split="train"):
    """
    Load an MNIST split from its IDX image and label files.

    Parameters
    ----------
    images_path : str
       The ``*-images-idx3-ubyte`` file (magic 2051).
    labels_path : str
       The ``*-labels-idx1-ubyte`` file (magic 2049).
    split : str, optional
       Recorded on the dataset.

    Raises
    ------
    IdxMagicError, IdxTruncatedError, IdxDimensionError, IdxCountMismatchError
    """
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise IdxCountMismatchError(
            f"{images_path} holds {len(pixels)} images but {labels_path} "
            f"holds {len(labels)} labels."
        )
    images = normalize(pixels[:, None, :, :], MNIST_MEAN, MNIST_STD)
    logger.info(f"Loaded {len(labels)} MNIST {split} samples from {images_path}")
    return Dataset(images, labels.astype(np.int64), classes=10, split=split,
                   mean=MNIST_MEAN, std=MNIST_STD)


def load_mnist_directory(directory, split="train"):
    """Load a split from a directory holding the four uncompressed MNIST files."""
    if not os.path.isdir(directory):
        raise DatasetNotFoundError(f"The MNIST directory {directory} does not exist.")
    images, labels = MNIST_FILES[split]
    return load_mnist_idx(os.path.join(directory, images), os.path.join(directory, labels),
                          split=split)


def load_cifar10_binary(directory, split="train", records_per_file=CIFAR_RECORDS_PER_FILE):
    """
    Load CIFAR-10 from the binary batch files.

    Each record is one label byte followed by 3072 pixel bytes in
    channel-major order.

    Parameters
    ----------
    directory : str
       The ``cifar-10-batches-bin`` directory.
    split : str, optional
       ``"train"`` reads ``data_batch_1.bin`` to ``data_batch_5.bin``,
       ``"test"`` reads ``test_batch.bin``.
    records_per_file : int, optional
       The number of records each file must hold. Defaults to 10000.

    Raises
    ------
    DatasetNotFoundError, CifarSizeError
    """
    if not os.path.isdir(directory):
        raise DatasetNotFoundError(f"The CIFAR-10 directory {directory} does not exist.")
    labels, pixels = [], []
    expected = records_per_file * CIFAR_RECORD_BYTES
    for name in CIFAR_FILES[split]:
        path = os.path.join(directory, name)
        payload = _read_bytes(path)
        if len(payload) != expected:
            raise CifarSizeError(f"{path} holds {len(payload)} bytes, expected {expected}.")
        records = np.frombuffer(payload, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0])
        pixels.append(records[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels).astype(np.int64)
    if labels.max() > 9:
        raise CifarSizeError(f"{directory} holds labels outside [0, 9].")
    images = normalize(np.concatenate(pixels), CIFAR_MEAN, CIFAR_STD)
    logger.info(f"Loaded {len(labels)} CIFAR-10 {split} samples from {directory}")
    return Dataset(images, labels, classes=10, split=split, mean=CIFAR_MEAN, std=CIFAR_STD)


def synthetic_task(classes, samples, shape, seed, separation=SYNTHETIC_SEPARATION,
                   noise=1.0, split="train"):
    """
    A seeded classification task of Gaussian class prototypes plus noise.

    Each prototype is a per-channel offset plus a spatial pattern, both
    scaled by ``separation``. The train and test splits of the same seed
    share prototypes and draw independent noise.

    Parameters
    ----------
    classes : int
       At least 2.
    samples : int
    shape : tuple
       ``(channels, height, width)``.
    seed : int
    separation : float, optional
       With 0 the classes are indistinguishable.
    noise : float, optional
       Standard deviation of the per-pixel noise.
    split : str, optional
    """
    if classes < 2:
        raise ValueError("A classification task needs at least 2 classes.")
    shape = tuple(shape)
    prototype_rng = np.random.default_rng(seed)
    offsets = prototype_rng.normal(size=(classes, shape[0], 1, 1))
    patterns = 0.5 * prototype_rng.normal(size=(classes,) + shape)
    prototypes = separation * (offsets + patterns)
    sample_rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = sample_rng.integers(0, classes, size=samples)
    images = prototypes[labels] + noise * sample_rng.normal(size=(samples,) + shape)
    return Dataset(images, labels.astype(np.int64), classes=classes, split=split,
                   mean=(0.0,) * shape[0], std=(1.0,) * shape[0])


def load_dataset(name, directory=None, split="train", seed=0, samples=None, shape=None,
                 classes=10):
    """
    Load a dataset by name: ``mnist``, ``cifar10`` or ``synthetic``.
    """
    if name == "mnist":
        dataset = load_mnist_directory(directory, split)
    elif name == "cifar10":
        dataset = load_cifar10_binary(directory, split)
    elif name == "synthetic":
        default = 2000 if split == "train" else 500
        dataset = synthetic_task(classes, samples or default, shape or (1, 16, 16), seed,
                                 split=split)
        samples = None
    else:
        raise ValueError(f"Unknown dataset {name}; expected mnist, cifar10 or synthetic.")
    if samples:
        dataset = dataset.subset(samples)
    return dataset
