"""Dataset containers, preprocessing and batch iteration.

IDX layout (big-endian): two zero bytes, a dtype code (0x08 = unsigned byte),
the number of dimensions, one uint32 per dimension, then the raw values.
CIFAR binary batches are fixed-size records: one label byte (CIFAR-10) or a
coarse and a fine label byte (CIFAR-100) followed by 3072 channel-major pixels.
"""

import gzip
import queue
import threading
from collections.abc import Iterator
from pathlib import Path

import numpy as np

from src.core.config import settings
from src.helpers.constants import CIFAR10_MEAN, CIFAR10_STD, CIFAR100_MEAN, CIFAR100_STD
from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError, ParseError
from src.helpers.repository import BaseRepository, ByteReader
from src.models.datasets import Dataset
from src.models.training import TrainConfig

logger = Logger(__name__)

IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
CIFAR_PIXELS = 3 * 32 * 32
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    10: {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    100: {"train": ["train.bin"], "test": ["test.bin"]},
}
CIFAR_DIRS = {10: "cifar-10-batches-bin", 100: "cifar-100-binary"}


class DatasetRepository(BaseRepository):
    def _read(self, path: Path) -> bytes:
        data = path.read_bytes()
        if data[:2] == b"\x1f\x8b":
            data = gzip.decompress(data)
        return data

    def _find(self, directory: Path, name: str) -> Path:
        for candidate in (directory / name, directory / f"{name}.gz"):
            if candidate.exists():
                return candidate
        raise ConfigurationError(f"dataset file '{name}' not found under {directory}")

    def read_idx(self, path: str | Path) -> np.ndarray:
        path = self.resolve(path)
        reader = ByteReader(self._read(path), str(path))
        zero, code, ndim = reader.unpack(">HBB", "magic")
        if zero != 0 or code not in IDX_TYPES:
            raise ParseError(str(path), 0, "bad IDX magic")
        dims = reader.unpack(f">{ndim}I", "dimensions")
        dtype = np.dtype(IDX_TYPES[code])
        expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if reader.remaining < expected:
            raise ParseError(
                str(path), reader.offset + reader.remaining, f"truncated payload, expected {expected} bytes"
            )
        payload = reader.take(expected, "payload")
        return np.frombuffer(payload, dtype=dtype).reshape(dims)

    def load_idx(
        self, images_path: str | Path, labels_path: str | Path, split: str = "train", name: str = "mnist"
    ) -> Dataset:
        images = self.read_idx(images_path)
        labels = self.read_idx(labels_path)
        if images.ndim != 3:
            raise ParseError(str(images_path), 3, f"expected a 3-dimensional image array, got {images.ndim}")
        if labels.shape[0] != images.shape[0]:
            raise ParseError(str(labels_path), 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
        scaled = images.astype(np.float32)[:, None, :, :] / 255.0
        return Dataset(
            images=scaled,
            labels=labels.astype(np.int64),
            num_classes=int(labels.max()) + 1 if labels.size else 10,
            split=split,
            name=name,
        )

    def load_mnist(self, directory: str | Path, split: str = "train") -> Dataset:
        directory = self.resolve(directory)
        if (directory / "mnist").is_dir():
            directory = directory / "mnist"
        images, labels = MNIST_FILES[split]
        dataset = self.load_idx(self._find(directory, images), self._find(directory, labels), split, "mnist")
        return dataset.model_copy(update={"num_classes": 10})

    def load_cifar_binary(
        self,
        directory: str | Path,
        variant: int = 10,
        split: str = "train",
        mean: tuple[float, ...] | None = None,
        std: tuple[float, ...] | None = None,
    ) -> Dataset:
        if variant not in CIFAR_FILES:
            raise ConfigurationError(f"CIFAR variant must be 10 or 100, got {variant}")
        directory = self.resolve(directory)
        if (directory / CIFAR_DIRS[variant]).is_dir():
            directory = directory / CIFAR_DIRS[variant]
        label_bytes = 1 if variant == 10 else 2
        record = label_bytes + CIFAR_PIXELS

        images: list[np.ndarray] = []
        labels: list[np.ndarray] = []
        for name in CIFAR_FILES[variant][split]:
            path = self._find(directory, name)
            data = self._read(path)
            if len(data) % record:
                offset = (len(data) // record) * record
                raise ParseError(str(path), offset, f"record size mismatch, expected multiples of {record} bytes")
            rows = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
            labels.append(rows[:, label_bytes - 1].astype(np.int64))
            images.append(rows[:, label_bytes:].reshape(-1, 3, 32, 32))

        pixels = np.concatenate(images).astype(np.float32) / 255.0
        dataset = Dataset(
            images=pixels,
            labels=np.concatenate(labels),
            num_classes=variant,
            split=split,
            name=f"cifar{variant}",
        )
        if mean is None or std is None:
            mean, std = (CIFAR10_MEAN, CIFAR10_STD) if variant == 10 else (CIFAR100_MEAN, CIFAR100_STD)
        return normalize(dataset, mean, std)

    def load(self, config: TrainConfig, split: str, directory: str | Path | None = None) -> Dataset:
        """Dataset named by `config`, with its subset and normalisation applied."""
        mean = tuple(config.channel_mean) if config.channel_mean else None
        std = tuple(config.channel_std) if config.channel_std else None
        subset_size = config.train_subset if split == "train" else config.test_subset

        if config.dataset in ("blobs", "xor"):
            dataset = synth_dataset(
                config.dataset,
                config.synth_samples,
                config.seed,
                num_classes=config.network_spec().num_classes,
                separation=config.synth_separation,
                side=config.input_shape[1],
                split=split,
            )
        else:
            if directory is None:
                raise ConfigurationError(f"dataset '{config.dataset}' needs a data directory")
            if not self.resolve(directory).is_dir():
                raise ConfigurationError(f"data directory {directory} does not exist")
            if config.dataset == "mnist":
                dataset = self.load_mnist(directory, split)
                if config.normalize and mean and std:
                    dataset = normalize(dataset, mean, std)
            else:
                variant = 10 if config.dataset == "cifar10" else 100
                dataset = self.load_cifar_binary(directory, variant, split, mean, std)

        if subset_size is not None and subset_size < len(dataset):
            dataset = subset(dataset, subset_size, config.seed)
        if dataset.image_shape != tuple(config.input_shape):
            raise ConfigurationError(
                f"dataset images are {dataset.image_shape} but the network expects {tuple(config.input_shape)}"
            )
        logger.info("Loaded %s/%s with %d samples", dataset.name, split, len(dataset))
        return dataset


def normalize(dataset: Dataset, mean: tuple[float, ...], std: tuple[float, ...]) -> Dataset:
    channels = dataset.image_shape[0]
    if len(mean) != channels or len(std) != channels:
        raise ConfigurationError(f"normalisation constants need {channels} channels")
    if any(s <= 0.0 for s in std):
        raise ConfigurationError("normalisation std must be positive")
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    images = ((dataset.images - m) / s).astype(dataset.images.dtype)
    return dataset.model_copy(update={"images": images, "mean": tuple(mean), "std": tuple(std)})


def denormalize(dataset: Dataset) -> Dataset:
    if dataset.mean is None or dataset.std is None:
        return dataset
    m = np.asarray(dataset.mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(dataset.std, dtype=np.float64)[None, :, None, None]
    images = (dataset.images * s + m).astype(dataset.images.dtype)
    return dataset.model_copy(update={"images": images, "mean": None, "std": None})


def augment(
    batch: np.ndarray, rng: np.random.Generator, crop_pad: int = 0, flip_p: float = 0.0, pad_mode: str = "reflect"
) -> np.ndarray:
    """Random crop after padding by `crop_pad`, then horizontal flip with probability `flip_p`."""
    if crop_pad < 0 or not 0.0 <= flip_p <= 1.0:
        raise ConfigurationError("augment needs crop_pad >= 0 and flip_p in [0, 1]")
    if crop_pad == 0 and flip_p == 0.0:
        return batch
    out = batch.copy()
    size, _, height, width = batch.shape
    if crop_pad:
        mode = "reflect" if pad_mode == "reflect" else "constant"
        padded = np.pad(batch, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)), mode=mode)
        tops = rng.integers(0, 2 * crop_pad + 1, size=size)
        lefts = rng.integers(0, 2 * crop_pad + 1, size=size)
        for n in range(size):
            out[n] = padded[n, :, tops[n] : tops[n] + height, lefts[n] : lefts[n] + width]
    if flip_p:
        flips = rng.random(size) < flip_p
        out[flips] = out[flips][..., ::-1]
    return out


def flip_horizontal(batch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(batch[..., ::-1])


def synth_dataset(
    kind: str,
    n: int,
    seed: int,
    num_classes: int = 2,
    separation: float = 4.0,
    side: int = 4,
    split: str = "train",
) -> Dataset:
    """Deterministic labelled point clouds shaped as 1×side×side images.

    `blobs` draws one Gaussian cloud per class around well separated centres;
    `xor` labels points by the sign of the product of two coordinates (two classes).
    Class centres depend on `seed` only, so splits of one seed share them.
    """
    if n < 2:
        raise ConfigurationError("synthetic datasets need at least 2 samples")
    rng = np.random.default_rng((seed, 0 if split == "train" else 1))
    dim = side * side
    labels = np.arange(n, dtype=np.int64) % num_classes
    rng.shuffle(labels)

    if kind == "blobs":
        centres = np.random.default_rng(seed).normal(size=(num_classes, dim))
        centres /= np.linalg.norm(centres, axis=1, keepdims=True)
        points = centres[labels] * separation / 2.0 + 0.25 * rng.normal(size=(n, dim))
    elif kind == "xor":
        if num_classes != 2:
            raise ConfigurationError("xor data has exactly 2 classes")
        signs = rng.choice([-1.0, 1.0], size=(n, 2))
        flip = labels == 1
        signs[flip, 1] = -signs[flip, 0]
        signs[~flip, 1] = signs[~flip, 0]
        points = 0.25 * rng.normal(size=(n, dim))
        points[:, :2] += signs * separation / 2.0
    else:
        raise ConfigurationError(f"unknown synthetic dataset '{kind}'")

    images = points.reshape(n, 1, side, side).astype(np.float32)
    return Dataset(images=images, labels=labels, num_classes=num_classes, split=split, name=kind)


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """First `n` samples of a seeded shuffle."""
    if not 0 < n <= len(dataset):
        raise ConfigurationError(f"subset size {n} outside (0, {len(dataset)}]")
    index = np.random.default_rng(seed).permutation(len(dataset))[:n]
    return dataset.take(np.sort(index))


def batch_order(size: int, batch_size: int, rng: np.random.Generator | None, shuffle: bool = True) -> list[np.ndarray]:
    order = rng.permutation(size) if shuffle and rng is not None else np.arange(size)
    return [order[start : start + batch_size] for start in range(0, size, batch_size)]


def iterate_batches(
    dataset: Dataset,
    batch_size: int,
    rng: np.random.Generator | None = None,
    shuffle: bool = True,
    augment_rng: np.random.Generator | None = None,
    crop_pad: int = 0,
    flip_p: float = 0.0,
    pad_mode: str = "reflect",
    prefetch: int | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (index, images, labels) batches in a fixed order.

    With `prefetch` > 0 a producer thread prepares up to that many batches
    ahead through a bounded queue; order and augmentation draws are the same
    as the sequential path.
    """
    prefetch = settings.PREFETCH_BATCHES if prefetch is None else prefetch
    batches = batch_order(len(dataset), batch_size, rng, shuffle)

    def build(index: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        images = dataset.images[index]
        if augment_rng is not None:
            images = augment(images, augment_rng, crop_pad, flip_p, pad_mode)
        return index, images, dataset.labels[index]

    if prefetch <= 0:
        for index in batches:
            yield build(index)
        return

    buffer: queue.Queue = queue.Queue(maxsize=prefetch)
    done = object()
    stop = threading.Event()

    def produce() -> None:
        try:
            for index in batches:
                if stop.is_set():
                    return
                buffer.put(build(index))
        except Exception as e:  # handed to the consumer
            buffer.put(e)
            return
        buffer.put(done)

    worker = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.05)
