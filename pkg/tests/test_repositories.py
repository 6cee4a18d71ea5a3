import gzip
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.helpers.model import ConfigurationError, CorruptionError, DigestMismatchError, ParseError
from src.models.diagnostics import BetaSweepRecord, ComparisonRecord
from src.models.runs import Checkpoint, RunManifest, TeacherLogits
from src.models.training import AugMode
from src.repositories.checkpoints import CheckpointRepository
from src.repositories.datasets import (
    DatasetRepository,
    augment,
    denormalize,
    flip_horizontal,
    iterate_batches,
    normalize,
    subset,
    synth_dataset,
)
from src.repositories.records import RecordRepository
from src.repositories.runs import RunRepository
from src.repositories.teacher_logits import TeacherLogitsRepository


def idx_bytes(array: np.ndarray) -> bytes:
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.astype(np.uint8).tobytes()


@pytest.fixture
def mnist_dir(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(6, 28, 28))
    labels = np.array([0, 1, 2, 3, 4, 9])
    (tmp_path / "train-images-idx3-ubyte").write_bytes(idx_bytes(images))
    (tmp_path / "train-labels-idx1-ubyte.gz").write_bytes(gzip.compress(idx_bytes(labels)))
    return tmp_path, images, labels


def test_read_idx_plain_and_gzip(mnist_dir):
    directory, images, labels = mnist_dir
    repository = DatasetRepository()
    assert_array_equal(repository.read_idx(directory / "train-images-idx3-ubyte"), images)
    assert_array_equal(repository.read_idx(directory / "train-labels-idx1-ubyte.gz"), labels)


def test_load_mnist(mnist_dir):
    directory, images, labels = mnist_dir
    dataset = DatasetRepository().load_mnist(directory, "train")
    assert dataset.images.shape == (6, 1, 28, 28)
    assert dataset.num_classes == 10
    assert_allclose(dataset.images[:, 0], images / 255.0, rtol=1e-6)
    assert_array_equal(dataset.labels, labels)


def test_truncated_idx_reports_offset(tmp_path):
    path = tmp_path / "short"
    path.write_bytes(idx_bytes(np.zeros((2, 3, 3)))[:-4])
    with pytest.raises(ParseError) as error:
        DatasetRepository().read_idx(path)
    assert error.value.offset == 16 + 14


def test_bad_idx_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(ParseError):
        DatasetRepository().read_idx(path)


def test_missing_mnist_files(tmp_path):
    with pytest.raises(ConfigurationError):
        DatasetRepository().load_mnist(tmp_path, "test")


def cifar_records(labels, label_bytes=1):
    rng = np.random.default_rng(1)
    rows = []
    for label in labels:
        prefix = bytes([0] * (label_bytes - 1) + [label])
        rows.append(prefix + rng.integers(0, 256, size=3072).astype(np.uint8).tobytes())
    return b"".join(rows)


def test_cifar_test_batch(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(cifar_records([3, 7]))
    dataset = DatasetRepository().load_cifar_binary(tmp_path, 10, "test", mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
    assert dataset.images.shape == (2, 3, 32, 32)
    assert_array_equal(dataset.labels, [3, 7])
    assert dataset.images.max() <= 1.0


def test_cifar100_uses_fine_labels(tmp_path):
    (tmp_path / "test.bin").write_bytes(cifar_records([42, 99], label_bytes=2))
    dataset = DatasetRepository().load_cifar_binary(tmp_path, 100, "test")
    assert_array_equal(dataset.labels, [42, 99])
    assert dataset.mean is not None


def test_cifar_record_size_mismatch(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(cifar_records([1, 2]) + b"\x00" * 10)
    with pytest.raises(ParseError) as error:
        DatasetRepository().load_cifar_binary(tmp_path, 10, "test")
    assert error.value.offset == 2 * 3073


def test_normalize_round_trip():
    dataset = synth_dataset("blobs", 8, seed=0, num_classes=2, side=4)
    scaled = normalize(dataset, (0.5,), (2.0,))
    assert_allclose(denormalize(scaled).images, dataset.images, rtol=1e-6, atol=1e-6)
    with pytest.raises(ConfigurationError):
        normalize(dataset, (0.5, 0.5), (1.0, 1.0))


def test_synthetic_data_is_seeded():
    a = synth_dataset("xor", 32, seed=5)
    b = synth_dataset("xor", 32, seed=5)
    assert_array_equal(a.images, b.images)
    assert a.digest() == b.digest()
    assert synth_dataset("xor", 32, seed=6).digest() != a.digest()
    with pytest.raises(ConfigurationError):
        synth_dataset("xor", 32, seed=5, num_classes=3)


def test_synthetic_splits_share_class_centres():
    train = synth_dataset("blobs", 300, seed=2, num_classes=3, separation=8.0, split="train")
    test = synth_dataset("blobs", 300, seed=2, num_classes=3, separation=8.0, split="test")
    assert not np.array_equal(train.images, test.images)
    for label in range(3):
        a = train.images[train.labels == label].mean(axis=0)
        b = test.images[test.labels == label].mean(axis=0)
        assert np.abs(a - b).max() < 0.25


def test_subset_is_seeded_and_sorted():
    dataset = synth_dataset("blobs", 20, seed=0, num_classes=2)
    picked = subset(dataset, 5, seed=1)
    assert len(picked) == 5
    assert_array_equal(subset(dataset, 5, seed=1).images, picked.images)
    with pytest.raises(ConfigurationError):
        subset(dataset, 21, seed=1)


def test_augment():
    rng = np.random.default_rng(0)
    batch = rng.normal(size=(3, 1, 4, 4))
    assert_array_equal(augment(batch, rng, flip_p=1.0), flip_horizontal(batch))
    cropped = augment(batch, rng, crop_pad=2, pad_mode="zero")
    assert cropped.shape == batch.shape
    assert augment(batch, rng) is batch


def test_prefetched_batches_match_sequential():
    dataset = synth_dataset("blobs", 23, seed=0, num_classes=2)
    sequential = list(iterate_batches(dataset, 5, np.random.default_rng(3), prefetch=0))
    prefetched = list(iterate_batches(dataset, 5, np.random.default_rng(3), prefetch=2))
    assert len(sequential) == 5
    for (i, x, y), (j, u, v) in zip(sequential, prefetched):
        assert_array_equal(i, j)
        assert_array_equal(x, u)
        assert_array_equal(y, v)


def checkpoint():
    return Checkpoint(
        spec_digest="ab" * 32,
        epoch=7,
        seed=11,
        tensors={"layers.0.weight": np.arange(6.0).reshape(2, 3), "layers.0.bias": np.ones(2, dtype=np.float32)},
    )


def test_checkpoint_round_trip(tmp_path):
    repository = CheckpointRepository(tmp_path)
    path = repository.write("run/last.ckpt", checkpoint())
    assert path == tmp_path / "run" / "last.ckpt"
    restored = repository.read("run/last.ckpt", "ab" * 32)
    assert (restored.epoch, restored.seed) == (7, 11)
    assert restored.tensors["layers.0.bias"].dtype == np.float32
    assert_array_equal(restored.tensors["layers.0.weight"], checkpoint().tensors["layers.0.weight"])


def test_checkpoint_corruption(tmp_path):
    repository = CheckpointRepository(tmp_path)
    payload = bytearray(repository.encode(checkpoint()))
    payload[60] ^= 0xFF
    with pytest.raises(CorruptionError):
        repository.decode(bytes(payload))
    with pytest.raises(CorruptionError):
        repository.decode(b"NOTACKPT" + bytes(payload[8:]))
    with pytest.raises(CorruptionError):
        repository.read("missing.ckpt")


def test_checkpoint_digest_mismatch(tmp_path):
    repository = CheckpointRepository(tmp_path)
    repository.write("last.ckpt", checkpoint())
    with pytest.raises(DigestMismatchError):
        repository.read("last.ckpt", "cd" * 32)


def teacher_logits(digest):
    return TeacherLogits(
        dataset_digest=digest,
        layers={-1: np.arange(6, dtype=np.float32).reshape(3, 2), 1: np.ones((3, 4), dtype=np.float32)},
    )


def test_teacher_logits_round_trip(tmp_path):
    repository = TeacherLogitsRepository(tmp_path)
    digest = "12" * 32
    repository.write("teacher.bin", teacher_logits(digest))
    loaded = repository.load("teacher.bin", digest, num_samples=3)
    assert loaded.dims() == {-1: 2, 1: 4}
    assert_array_equal(loaded.layers[-1], teacher_logits(digest).layers[-1])


def test_teacher_logits_refusals(tmp_path):
    repository = TeacherLogitsRepository(tmp_path)
    digest = "12" * 32
    repository.write("teacher.bin", teacher_logits(digest))
    with pytest.raises(DigestMismatchError):
        repository.load("teacher.bin", "34" * 32)
    with pytest.raises(CorruptionError):
        repository.load("teacher.bin", digest, num_samples=4)
    with pytest.raises(ConfigurationError):
        repository.load("absent.bin", digest)
    payload = repository.encode(teacher_logits(digest))
    with pytest.raises(CorruptionError):
        repository.decode(payload[:-3])
    with pytest.raises(CorruptionError):
        repository.decode(b"XXXXXXXX" + payload[8:])


def test_records_round_trip(tmp_path):
    repository = RecordRepository(tmp_path)
    rows = [
        ComparisonRecord(
            reference="bptt", candidate="ep3", beta=0.1, tensor="all", cosine=0.99, relative_error=0.1, sign_agreement=1.0
        ),
        ComparisonRecord(
            reference="fd", candidate="bptt", beta=None, tensor="all", cosine=1.0, relative_error=0.0, sign_agreement=1.0
        ),
    ]
    path = repository.write("comparisons.csv", rows, ComparisonRecord)
    assert path.read_text().splitlines()[0] == "reference,candidate,beta,tensor,cosine,relative_error,sign_agreement"
    assert repository.read("comparisons.csv", ComparisonRecord) == rows


def test_records_refusals(tmp_path):
    repository = RecordRepository(tmp_path)
    with pytest.raises(ConfigurationError):
        repository.write("empty.csv", [], BetaSweepRecord)
    repository.write("sweep.csv", [BetaSweepRecord(beta=0.1, error_to_fd=0.01, cosine_to_fd=0.9)], BetaSweepRecord)
    with pytest.raises(CorruptionError):
        repository.read("sweep.csv", ComparisonRecord)


def test_config_precedence(tmp_path):
    (tmp_path / "run.env").write_text("architecture=fc-8,fc-3\ninput_shape=1,2,2\nlearning_rates=0.1x2\nbeta=0.3\nmode=le\nupsilon=0\n")
    repository = RunRepository(tmp_path)
    config = repository.load_config("run.env", {"beta": 0.2, "kappa": None})
    assert config.beta == 0.2
    assert config.kappa == 0.65
    assert config.mode == AugMode.LE
    assert config.upsilon == [0]
    assert config.layer_learning_rates() == [0.1, 0.1]


def test_config_errors(tmp_path):
    repository = RunRepository(tmp_path)
    (tmp_path / "typo.env").write_text("betta=0.3\n")
    with pytest.raises(ConfigurationError):
        repository.load_config("typo.env")
    (tmp_path / "spans.env").write_text("architecture=fc-8,fc-3\ninput_shape=1,2,2\nlearning_rates=0.1x3\n")
    with pytest.raises(ConfigurationError):
        repository.load_config("spans.env")
    with pytest.raises(ConfigurationError):
        repository.load_config("absent.env")


def test_manifest_round_trip(tmp_path):
    repository = RunRepository()
    manifest = RunManifest(command="train", config={"beta": 0.25}, seed=1, code_version="0.1.0", out_dir=str(tmp_path))
    manifest.finish(0)
    repository.write_manifest(tmp_path, manifest)
    loaded = repository.read_manifest(tmp_path)
    assert loaded.exit_code == 0
    assert loaded.config == {"beta": 0.25}
