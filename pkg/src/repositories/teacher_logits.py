"""Teacher-logits container.

Little-endian layout:

    magic "CRNNTLOG" | version u16 | sample count u32 | layer count u16
    | per layer: student layer key i32 (-1 = final output) | logit dim u32
    | dataset digest (32 raw bytes)
    | per layer, in header order: float32 rows, row-major (count x dim)
"""

import struct
from pathlib import Path

import numpy as np

from src.helpers.constants import TEACHER_LOGITS_MAGIC, TEACHER_LOGITS_VERSION
from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError, CorruptionError, DigestMismatchError, ParseError
from src.helpers.repository import BaseRepository, ByteReader
from src.models.runs import TeacherLogits

logger = Logger(__name__)


class TeacherLogitsRepository(BaseRepository):
    def encode(self, logits: TeacherLogits) -> bytes:
        count = logits.num_samples
        keys = sorted(logits.layers)
        parts = [
            TEACHER_LOGITS_MAGIC,
            struct.pack("<HIH", TEACHER_LOGITS_VERSION, count, len(keys)),
        ]
        for key in keys:
            rows = logits.layers[key]
            if rows.ndim != 2 or rows.shape[0] != count:
                raise CorruptionError(f"teacher logits for layer {key} must be {count} rows")
            parts.append(struct.pack("<iI", key, rows.shape[1]))
        parts.append(bytes.fromhex(logits.dataset_digest))
        for key in keys:
            parts.append(np.ascontiguousarray(logits.layers[key], dtype="<f4").tobytes())
        return b"".join(parts)

    def decode(self, payload: bytes, path: str = "<memory>") -> TeacherLogits:
        reader = ByteReader(payload, path)
        if payload[: len(TEACHER_LOGITS_MAGIC)] != TEACHER_LOGITS_MAGIC:
            raise CorruptionError(f"{path}: not a teacher-logits file (bad magic)")
        try:
            reader.take(len(TEACHER_LOGITS_MAGIC), "magic")
            version, count, layers = reader.unpack("<HIH", "header")
            if version != TEACHER_LOGITS_VERSION:
                raise CorruptionError(f"{path}: unsupported teacher-logits version {version}")
            dims = [reader.unpack("<iI", "layer entry") for _ in range(layers)]
            digest = reader.take(32, "dataset digest").hex()
            expected = sum(count * dim * 4 for _, dim in dims)
            if reader.remaining != expected:
                raise CorruptionError(
                    f"{path}: payload holds {reader.remaining} bytes, header describes {expected}"
                )
            table: dict[int, np.ndarray] = {}
            for key, dim in dims:
                raw = reader.take(count * dim * 4, f"layer {key} logits")
                table[key] = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float32)
        except ParseError as e:
            raise CorruptionError(str(e)) from e
        return TeacherLogits(dataset_digest=digest, layers=table)

    def write(self, path: str | Path, logits: TeacherLogits) -> Path:
        target = self.write_bytes(path, self.encode(logits))
        logger.info("Teacher logits for %d samples written to %s", logits.num_samples, target)
        return target

    def load(self, path: str | Path, dataset_digest: str, num_samples: int | None = None) -> TeacherLogits:
        """Read a logits file and refuse it unless it was exported for `dataset_digest`."""
        source = self.resolve(path)
        if not source.is_file():
            raise ConfigurationError(f"teacher-logits file {source} not found")
        logits = self.decode(source.read_bytes(), str(source))
        if logits.dataset_digest != dataset_digest:
            raise DigestMismatchError(
                f"{source}: teacher logits belong to dataset {logits.dataset_digest[:12]}, "
                f"not {dataset_digest[:12]}"
            )
        if num_samples is not None and logits.num_samples != num_samples:
            raise CorruptionError(f"{source}: {logits.num_samples} rows for {num_samples} samples")
        return logits
